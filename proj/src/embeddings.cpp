#include "pkb/embeddings.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "pkb/error.hpp"
#include "pkb/json_io.hpp"
#include "pkb/random.hpp"

namespace pkb {

const char* to_string(Label label) noexcept {
    return label == Label::pedestrian ? "pedestrian" : "background";
}

Label parse_label(std::string_view text) {
    if (text == "pedestrian") return Label::pedestrian;
    if (text == "background") return Label::background;
    fail(ErrorKind::parse, "unknown label '" + std::string(text) + "'");
}

EmbeddingDataset::EmbeddingDataset(std::size_t dim, std::vector<EmbeddingRecord> records)
    : dim_(dim), records_(std::move(records)) {
    std::unordered_set<std::string_view> ids;
    ids.reserve(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i) {
        const auto& r = records_[i];
        if (r.vector.size() != dim_) {
            fail(ErrorKind::dimension, "record '" + r.id + "' has dimension " +
                                           std::to_string(r.vector.size()) + ", expected " +
                                           std::to_string(dim_));
        }
        if (!all_finite(r.vector)) fail(ErrorKind::numeric, "record '" + r.id + "' has a non-finite coordinate");
        if (!ids.insert(r.id).second) fail(ErrorKind::precondition, "duplicate id '" + r.id + "'");
    }
}

std::size_t EmbeddingDataset::count(Label label) const noexcept {
    std::size_t n = 0;
    for (const auto& r : records_) n += r.label == label;
    return n;
}

namespace {

EmbeddingRecord parse_record(const std::string& line, std::size_t lineno) {
    const std::string where = "line " + std::to_string(lineno);
    nlohmann::json obj;
    try {
        obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::out_of_range& e) {
        fail(ErrorKind::numeric, where + ": non-finite coordinate (" + e.what() + ")");
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, where + ": malformed JSON (" + e.what() + ")");
    }
    if (!obj.is_object()) fail(ErrorKind::parse, where + ": expected a JSON object");

    EmbeddingRecord rec;
    const auto& id = json_io::require(obj, "id", where);
    if (!id.is_string()) fail(ErrorKind::parse, where + ": 'id' must be a string");
    rec.id = id.get<std::string>();

    const auto& label = json_io::require(obj, "label", where);
    if (!label.is_string()) fail(ErrorKind::parse, where + ": 'label' must be a string");
    try {
        rec.label = parse_label(label.get<std::string>());
    } catch (const Error& e) {
        fail(ErrorKind::parse, where + ": " + e.what());
    }

    const auto& vec = json_io::require(obj, "vector", where);
    if (!vec.is_array()) fail(ErrorKind::parse, where + ": 'vector' must be an array");
    rec.vector.reserve(vec.size());
    for (const auto& x : vec) {
        if (!x.is_number()) fail(ErrorKind::parse, where + ": 'vector' holds a non-number");
        const double v = x.get<double>();
        if (!std::isfinite(v)) fail(ErrorKind::numeric, where + ": non-finite coordinate");
        rec.vector.push_back(v);
    }
    return rec;
}

}  // namespace

EmbeddingDataset parse_embeddings(std::istream& in, const ParseOptions& options) {
    std::vector<EmbeddingRecord> records;
    std::unordered_set<std::string> ids;
    std::size_t dim = 0;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;

        auto rec = parse_record(line, lineno);
        const std::string where = "line " + std::to_string(lineno);
        if (records.empty()) {
            dim = rec.vector.size();
            if (dim == 0) fail(ErrorKind::dimension, where + ": empty vector");
        } else if (rec.vector.size() != dim) {
            fail(ErrorKind::dimension, where + ": vector has " + std::to_string(rec.vector.size()) +
                                           " coordinates, expected " + std::to_string(dim));
        }
        if (!ids.insert(rec.id).second) fail(ErrorKind::precondition, where + ": duplicate id '" + rec.id + "'");
        if (options.normalize) {
            try {
                rec.vector = l2_normalize(rec.vector);
            } catch (const Error& e) {
                fail(e.kind(), where + ": " + e.what());
            }
        }
        records.push_back(std::move(rec));
    }
    return EmbeddingDataset(dim, std::move(records));
}

EmbeddingDataset parse_embedding_file(const std::string& path, const ParseOptions& options) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot open '" + path + "' for reading");
    try {
        return parse_embeddings(in, options);
    } catch (const Error& e) {
        fail(e.kind(), path + ": " + e.what());
    }
}

void write_embeddings(std::ostream& out, const EmbeddingDataset& dataset) {
    for (const auto& r : dataset.records()) {
        out << "{\"id\":";
        json_io::write_string(out, r.id);
        out << ",\"label\":\"" << to_string(r.label) << "\",\"vector\":";
        json_io::write_array(out, r.vector);
        out << "}\n";
    }
}

void save_embedding_file(const EmbeddingDataset& dataset, const std::string& path) {
    std::ostringstream ss;
    write_embeddings(ss, dataset);
    json_io::write_file(path, ss.str());
}

LabelSplit split_by_label(const EmbeddingDataset& dataset) {
    std::vector<EmbeddingRecord> peds;
    std::vector<EmbeddingRecord> bgs;
    for (const auto& r : dataset.records()) {
        (r.label == Label::pedestrian ? peds : bgs).push_back(r);
    }
    return {EmbeddingDataset(dataset.dim(), std::move(peds)), EmbeddingDataset(dataset.dim(), std::move(bgs))};
}

std::vector<double> l2_normalize(std::span<const double> v) {
    // Scale first so the squared sum cannot overflow or underflow.
    double peak = 0.0;
    for (double x : v) peak = std::max(peak, std::abs(x));
    if (peak == 0.0) fail(ErrorKind::precondition, "cannot normalize a zero vector");
    if (!std::isfinite(peak)) fail(ErrorKind::numeric, "cannot normalize a non-finite vector");
    double ss = 0.0;
    for (double x : v) ss += (x / peak) * (x / peak);
    const double norm = peak * std::sqrt(ss);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / norm;
    return out;
}

EmbeddingDataset generate_synthetic(const SyntheticConfig& config) {
    if (config.dim < 2) fail(ErrorKind::precondition, "synthetic dimension must be at least 2");
    if (config.pedestrians == 0 && config.backgrounds == 0) {
        fail(ErrorKind::precondition, "synthetic counts must be positive");
    }
    if (!std::isfinite(config.separation) || config.separation < 0.0) {
        fail(ErrorKind::precondition, "separation must be finite and nonnegative");
    }
    const double offset = 0.5 * config.separation / std::sqrt(static_cast<double>(config.dim));
    Rng rng(config.seed);

    std::vector<EmbeddingRecord> records;
    records.reserve(config.pedestrians + config.backgrounds);
    auto emit = [&](Label label, std::size_t count, const char* prefix, double sign) {
        for (std::size_t i = 0; i < count; ++i) {
            EmbeddingRecord r;
            r.id = prefix + std::to_string(i);
            r.label = label;
            r.vector.resize(config.dim);
            for (auto& x : r.vector) x = sign * offset + rng.normal();
            records.push_back(std::move(r));
        }
    };
    emit(Label::pedestrian, config.pedestrians, "ped-", 1.0);
    emit(Label::background, config.backgrounds, "bg-", -1.0);
    return EmbeddingDataset(config.dim, std::move(records));
}

}  // namespace pkb
