#include "medfuse/config.hpp"

#include "medfuse/common.hpp"
#include "medfuse/io.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>

#include <sstream>

namespace medfuse {

namespace pt = boost::property_tree;

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse(io::read_file(path), path.string());
}

KeyValueConfig KeyValueConfig::parse(const std::string& text, const std::string& origin) {
  KeyValueConfig cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  try {
    pt::read_ini(in, cfg.tree_);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  return cfg;
}

std::optional<std::string> KeyValueConfig::raw(const std::string& key) const {
  auto node = tree_.get_optional<std::string>(key);
  if (!node) return std::nullopt;
  return boost::algorithm::trim_copy(*node);
}

void KeyValueConfig::fail(const std::string& key, const std::string& what) const {
  throw ConfigError(origin_ + ": key '" + key + "': " + what);
}

bool KeyValueConfig::has(const std::string& key) const { return raw(key).has_value(); }

bool KeyValueConfig::has_section(const std::string& section) const {
  return tree_.get_child_optional(section).has_value();
}

std::string KeyValueConfig::get_string(const std::string& key) const {
  auto v = raw(key);
  if (!v) fail(key, "missing required key");
  return *v;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  return raw(key).value_or(fallback);
}

double KeyValueConfig::get_double(const std::string& key) const {
  auto v = get_string(key);
  try {
    return io::parse_double(v);
  } catch (const ConfigError& e) {
    fail(key, e.what());
  }
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

long long KeyValueConfig::get_int(const std::string& key) const {
  auto v = get_string(key);
  try {
    return io::parse_int(v);
  } catch (const ConfigError& e) {
    fail(key, e.what());
  }
}

long long KeyValueConfig::get_int(const std::string& key, long long fallback) const {
  return has(key) ? get_int(key) : fallback;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  auto v = raw(key);
  if (!v) return fallback;
  auto s = boost::algorithm::to_lower_copy(*v);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  fail(key, "not a boolean: '" + *v + "'");
}

std::vector<std::string> KeyValueConfig::get_string_list(const std::string& key) const {
  std::vector<std::string> out;
  auto v = raw(key);
  if (!v || v->empty()) return out;
  boost::algorithm::split(out, *v, boost::is_any_of(","));
  for (auto& s : out) boost::algorithm::trim(s);
  return out;
}

std::vector<long long> KeyValueConfig::get_int_list(const std::string& key) const {
  std::vector<long long> out;
  for (const auto& s : get_string_list(key)) {
    try {
      out.push_back(io::parse_int(s));
    } catch (const ConfigError& e) {
      fail(key, e.what());
    }
  }
  return out;
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  tree_.put(key, value);
}

std::vector<std::pair<std::string, std::string>> KeyValueConfig::entries(
    const std::string& section) const {
  std::vector<std::pair<std::string, std::string>> out;
  auto child = tree_.get_child_optional(section);
  if (!child) return out;
  for (const auto& [k, v] : *child) out.emplace_back(k, boost::algorithm::trim_copy(v.data()));
  return out;
}

std::string KeyValueConfig::dump() const {
  std::ostringstream out;
  pt::write_ini(out, tree_);
  return out.str();
}

KeyValueConfig KeyValueConfig::section(const std::string& section,
                                       const std::string& as_section) const {
  KeyValueConfig out;
  out.origin_ = origin_ + "[" + section + "]";
  if (auto child = tree_.get_child_optional(section)) out.tree_.put_child(as_section, *child);
  return out;
}

}  // namespace medfuse
