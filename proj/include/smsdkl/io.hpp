#pragma once

#include <string>
#include <vector>

namespace smsdkl {

// Writes content to path via a temp file + rename so readers never observe
// a partially written file.
void atomic_write(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);

// RFC-4180 style quoting: wraps the field in double quotes when it contains
// a comma, quote, or newline, doubling any embedded quotes.
std::string csv_quote(const std::string& field);

// Splits one CSV line honouring quoted fields.
std::vector<std::string> csv_split(const std::string& line);

// Shortest decimal form that round-trips a double through %.12g; used for
// human-facing tables where bit-exactness is not required.
std::string format_g12(double v);

// Lossless text form of a double (printf %a).
std::string format_hex(double v);
double parse_hex(const std::string& s);

}  // namespace smsdkl
