#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace medfuse::io {

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

// Git-style blob hash: SHA-1 over "blob <size>\0<content>".
std::string content_hash(std::string_view content);
std::string file_hash(const std::filesystem::path& path);

// Shortest decimal text that parses back to the same double.
std::string format_double(double value);
double parse_double(std::string_view text);
long long parse_int(std::string_view text);

std::vector<std::string> split_csv_line(const std::string& line);
std::string csv_escape(std::string_view field);

// Rows of a CSV file with a mandatory header. `header` receives the column
// names; each row is checked for the header's width.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<int> line_numbers;

  int column(std::string_view name) const;  // -1 if absent
};

CsvTable read_csv(const std::filesystem::path& path);

}  // namespace medfuse::io
