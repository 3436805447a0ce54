#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace debias {

/// Splits UTF-8 text into one string per code point.
/// Throws std::invalid_argument naming the byte offset of the first bad sequence.
std::vector<std::string> utf8_chars(std::string_view text);

/// Number of code points; same validation as utf8_chars.
std::size_t utf8_length(std::string_view text);

std::string sha256_hex(std::string_view data);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

/// Splits on '\n'; a trailing newline does not produce an empty final line.
/// A '\r' before the newline is dropped.
std::vector<std::string> split_lines(std::string_view content);

std::string_view trim(std::string_view s);

bool starts_with(std::string_view s, std::string_view prefix);

/// Shortest round-trippable decimal rendering of a double ("%.17g" trimmed).
std::string format_double(double value);

/// Hexadecimal float rendering ("%a"), exact for every finite value.
std::string format_hexfloat(double value);
double parse_double(std::string_view text);

}  // namespace debias
