#pragma once

#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include <json.hpp>

#include "pkb/matrix.hpp"

namespace pkb::json_io {

// Shortest decimal text that parses back to the identical double. Integral
// values keep a trailing ".0" so readers see a real number (and -0.0 survives).
std::string format_number(double value);

void write_number(std::ostream& os, double value);
void write_array(std::ostream& os, std::span<const double> values);
// Array of row arrays.
void write_rows(std::ostream& os, const Matrix& m);
void write_string(std::ostream& os, std::string_view s);

// Typed accessors that raise ErrorKind::parse with `context` in the message.
const nlohmann::json& require(const nlohmann::json& obj, const char* key, std::string_view context);
double as_double(const nlohmann::json& v, std::string_view context);
std::size_t as_size(const nlohmann::json& v, std::string_view context);
Matrix as_matrix(const nlohmann::json& v, std::size_t rows, std::size_t cols, std::string_view context);

nlohmann::json parse_document(std::string_view text, std::string_view context);
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace pkb::json_io
