#include "pkb/json_io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "pkb/error.hpp"

namespace pkb::json_io {

std::string format_number(double value) {
    if (!std::isfinite(value)) {
        fail(ErrorKind::numeric, "cannot serialize a non-finite number");
    }
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), value);
    std::string out(buf, res.ptr);
    if (out.find_first_of(".e") == std::string::npos) out += ".0";
    return out;
}

void write_number(std::ostream& os, double value) { os << format_number(value); }

void write_array(std::ostream& os, std::span<const double> values) {
    os << '[';
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) os << ',';
        write_number(os, values[i]);
    }
    os << ']';
}

void write_rows(std::ostream& os, const Matrix& m) {
    os << '[';
    for (std::size_t r = 0; r < m.rows(); ++r) {
        if (r) os << ',';
        write_array(os, m.row(r));
    }
    os << ']';
}

void write_string(std::ostream& os, std::string_view s) {
    os << nlohmann::json(std::string(s)).dump();
}

const nlohmann::json& require(const nlohmann::json& obj, const char* key, std::string_view context) {
    if (!obj.is_object()) fail(ErrorKind::parse, std::string(context) + ": expected a JSON object");
    auto it = obj.find(key);
    if (it == obj.end()) {
        fail(ErrorKind::parse, std::string(context) + ": missing key '" + key + "'");
    }
    return *it;
}

double as_double(const nlohmann::json& v, std::string_view context) {
    if (!v.is_number()) fail(ErrorKind::parse, std::string(context) + ": expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) fail(ErrorKind::numeric, std::string(context) + ": non-finite number");
    return x;
}

std::size_t as_size(const nlohmann::json& v, std::string_view context) {
    if (!v.is_number_unsigned()) {
        fail(ErrorKind::parse, std::string(context) + ": expected a nonnegative integer");
    }
    return v.get<std::size_t>();
}

Matrix as_matrix(const nlohmann::json& v, std::size_t rows, std::size_t cols, std::string_view context) {
    const std::string ctx(context);
    if (!v.is_array()) fail(ErrorKind::parse, ctx + ": expected an array of rows");
    if (v.size() != rows) {
        fail(ErrorKind::dimension, ctx + ": expected " + std::to_string(rows) + " rows, found " +
                                       std::to_string(v.size()));
    }
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto& row = v[r];
        if (!row.is_array()) fail(ErrorKind::parse, ctx + ": row " + std::to_string(r) + " is not an array");
        if (row.size() != cols) {
            fail(ErrorKind::dimension, ctx + ": row " + std::to_string(r) + " has " +
                                           std::to_string(row.size()) + " values, expected " +
                                           std::to_string(cols));
        }
        for (std::size_t c = 0; c < cols; ++c) m(r, c) = as_double(row[c], ctx);
    }
    return m;
}

nlohmann::json parse_document(std::string_view text, std::string_view context) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::out_of_range& e) {
        fail(ErrorKind::numeric, std::string(context) + ": number out of range (" + e.what() + ")");
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, std::string(context) + ": " + e.what());
    }
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, std::string_view contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot open '" + path + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) fail(ErrorKind::io, "write to '" + path + "' failed");
}

}  // namespace pkb::json_io
