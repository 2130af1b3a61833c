#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace medfuse::cli {

// Runs one command line (args[0] is the program name) and returns the exit
// code: 0 success, 1 runtime failure, 2 usage or configuration error.
int run(const std::vector<std::string>& args);

const std::vector<std::string>& command_names();

// Closest command name by edit distance, or "" when nothing is close.
std::string suggest_command(const std::string& typo);

// Name of the manifest written next to (file output) or inside (directory
// output) `out`.
std::filesystem::path manifest_path_for(const std::filesystem::path& out, bool directory_output);

// Re-runs the command recorded in a manifest with its output redirected to
// `new_out`. Inputs are checked against the recorded content hashes first.
int replay(const std::filesystem::path& manifest, const std::filesystem::path& new_out);

}  // namespace medfuse::cli
