#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace gklab::compute {

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view text);

std::vector<std::string> split(std::string_view line, char sep);

/// Reads a CSV with a required header; rows are split on commas (no quoting).
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path,
                                               const std::vector<std::string>& header);

}  // namespace gklab::compute
