#pragma once

#include <boost/property_tree/ptree.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace medfuse {

// Flat key-value document with [sections], e.g.
//
//   [fusion]
//   kind = mufuse
//   d = 144
//
// Keys are addressed as "section.key". Parse errors carry file and line.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig load(const std::filesystem::path& path);
  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");

  bool has(const std::string& key) const;
  bool has_section(const std::string& section) const;

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<long long> get_int_list(const std::string& key) const;
  std::vector<std::string> get_string_list(const std::string& key) const;

  void set(const std::string& key, const std::string& value);

  // Key/value pairs of one section in file order.
  std::vector<std::pair<std::string, std::string>> entries(const std::string& section) const;

  // Canonical text (sections and keys in insertion order).
  std::string dump() const;
  const std::string& origin() const { return origin_; }

  // Sub-document for one section, re-rooted so that its keys live under
  // `as_section` (used to reuse a [cohort] block as a standalone spec).
  KeyValueConfig section(const std::string& section, const std::string& as_section) const;

 private:
  std::optional<std::string> raw(const std::string& key) const;
  [[noreturn]] void fail(const std::string& key, const std::string& what) const;

  boost::property_tree::ptree tree_;
  std::string origin_ = "<empty>";
};

}  // namespace medfuse
