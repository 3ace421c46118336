#include "pkb/attention.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "pkb/error.hpp"
#include "pkb/json_io.hpp"
#include "pkb/random.hpp"

namespace pkb {

const char* to_string(FeatureMode mode) noexcept { return mode == FeatureMode::proposal ? "proposal" : "query"; }

FeatureBatch FeatureBatch::proposals(std::size_t m, std::size_t h, std::size_t w, std::size_t c,
                                     std::vector<double> data) {
    FeatureBatch b{FeatureMode::proposal, m, h, w, c, std::move(data)};
    b.validate();
    return b;
}

FeatureBatch FeatureBatch::queries(std::size_t m, std::size_t c, std::vector<double> data) {
    FeatureBatch b{FeatureMode::query, m, 1, 1, c, std::move(data)};
    b.validate();
    return b;
}

void FeatureBatch::validate() const {
    if (c == 0 || h == 0 || w == 0) fail(ErrorKind::dimension, "feature blocks need positive h, w and c");
    if (mode == FeatureMode::query && (h != 1 || w != 1)) {
        fail(ErrorKind::dimension, "query-mode features must have h = w = 1");
    }
    if (data.size() != m * block_size()) {
        fail(ErrorKind::dimension, "feature data has " + std::to_string(data.size()) + " values, expected m*h*w*c = " +
                                       std::to_string(m * block_size()));
    }
    if (!all_finite(data)) fail(ErrorKind::numeric, "feature data holds a non-finite value");
}

Matrix flatten_block(std::span<const double> block, std::size_t h, std::size_t w, std::size_t c) {
    if (block.size() != h * w * c) fail(ErrorKind::dimension, "block size does not match h*w*c");
    // The (y, x, channel) layout already is the (y*w + x, channel) layout.
    return Matrix(h * w, c, std::vector<double>(block.begin(), block.end()));
}

std::vector<double> unflatten_block(const Matrix& flat) { return flat.values(); }

void AttentionParams::validate() const {
    if (heads == 0 || d_model == 0 || channels == 0 || bank_dim == 0) {
        fail(ErrorKind::dimension, "attention dimensions must be positive");
    }
    if (w_q.size() != heads || w_k.size() != heads || w_v.size() != heads) {
        fail(ErrorKind::dimension, "attention needs one projection triple per head");
    }
    auto check = [](const Matrix& m, std::size_t r, std::size_t c, const char* name) {
        if (m.rows() != r || m.cols() != c) {
            fail(ErrorKind::dimension, std::string(name) + " has shape " + std::to_string(m.rows()) + "x" +
                                           std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" +
                                           std::to_string(c));
        }
        if (!m.all_finite()) fail(ErrorKind::numeric, std::string(name) + " holds a non-finite value");
    };
    for (std::size_t j = 0; j < heads; ++j) {
        check(w_q[j], channels, d_model, "W_Q");
        check(w_k[j], bank_dim, d_model, "W_K");
        check(w_v[j], bank_dim, d_model, "W_V");
    }
    check(w_o, heads * d_model, channels, "W_O");
    if (gain.size() != channels || bias.size() != channels) {
        fail(ErrorKind::dimension, "layer-norm parameters must have length c");
    }
    if (!all_finite(gain) || !all_finite(bias)) fail(ErrorKind::numeric, "layer-norm parameters are not finite");
    if (!(eps > 0.0) || !std::isfinite(eps)) fail(ErrorKind::precondition, "layer-norm eps must be positive");
}

AttentionParams init_attention(std::size_t channels, std::size_t bank_dim, std::size_t d_model, std::size_t heads,
                               std::uint64_t seed) {
    if (channels == 0 || bank_dim == 0 || d_model == 0 || heads == 0) {
        fail(ErrorKind::precondition, "attention dimensions must be positive");
    }
    Rng rng(seed);
    auto gaussian = [&](std::size_t rows, std::size_t cols) {
        Matrix m(rows, cols);
        const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
        for (auto& x : m.flat()) x = scale * rng.normal();
        return m;
    };
    AttentionParams p;
    p.heads = heads;
    p.d_model = d_model;
    p.channels = channels;
    p.bank_dim = bank_dim;
    for (std::size_t j = 0; j < heads; ++j) {
        p.w_q.push_back(gaussian(channels, d_model));
        p.w_k.push_back(gaussian(bank_dim, d_model));
        p.w_v.push_back(gaussian(bank_dim, d_model));
    }
    p.w_o = gaussian(heads * d_model, channels);
    p.gain.assign(channels, 1.0);
    p.bias.assign(channels, 0.0);
    return p;
}

namespace {

struct RowMoments {
    double mean;
    double inv_std;
};

RowMoments moments(std::span<const double> row, double eps) {
    const double c = static_cast<double>(row.size());
    double mean = 0.0;
    for (double x : row) mean += x;
    mean /= c;
    // Second pass removes the rounding error of the first mean.
    double resid = 0.0;
    for (double x : row) resid += x - mean;
    mean += resid / c;
    double var = 0.0;
    for (double x : row) var += (x - mean) * (x - mean);
    var /= c;
    return {mean, 1.0 / std::sqrt(var + eps)};
}

}  // namespace

std::vector<double> layer_norm(std::span<const double> row, std::span<const double> gain,
                               std::span<const double> bias, double eps) {
    if (row.size() < 2) fail(ErrorKind::precondition, "layer norm needs at least 2 channels");
    if (gain.size() != row.size() || bias.size() != row.size()) {
        fail(ErrorKind::dimension, "layer-norm parameters must match the row length");
    }
    const auto mom = moments(row, eps);
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = gain[i] * ((row[i] - mom.mean) * mom.inv_std) + bias[i];
    return out;
}

namespace {

struct BankProjections {
    std::vector<Matrix> keys;    // per head, N x d_model
    std::vector<Matrix> values;  // per head, N x d_model
};

struct BlockForward {
    Matrix x;                     // positions x c
    std::vector<Matrix> queries;  // per head, positions x d_model
    std::vector<Matrix> assoc;    // per head, positions x N
    Matrix concat;                // positions x (heads * d_model)
    Matrix pre_norm;              // positions x c
    Matrix normed;                // (pre_norm - mean) * inv_std
    std::vector<double> inv_std;  // per position
    Matrix output;                // positions x c
};

void check_inputs(const FeatureBatch& batch, const Matrix& bank_features, const AttentionParams& params) {
    batch.validate();
    params.validate();
    if (bank_features.rows() == 0) fail(ErrorKind::dimension, "bank has no rows");
    if (!bank_features.all_finite()) fail(ErrorKind::numeric, "bank features hold a non-finite value");
    if (bank_features.cols() != params.bank_dim) {
        fail(ErrorKind::dimension, "bank dimension " + std::to_string(bank_features.cols()) +
                                       " does not match W_K/W_V input dimension " + std::to_string(params.bank_dim));
    }
    if (batch.c != params.channels) {
        fail(ErrorKind::dimension, "feature channels " + std::to_string(batch.c) +
                                       " do not match W_Q input dimension " + std::to_string(params.channels));
    }
    if (batch.c < 2) fail(ErrorKind::precondition, "layer norm needs at least 2 channels");
}

BankProjections project_bank(const Matrix& bank_features, const AttentionParams& params) {
    BankProjections proj;
    for (std::size_t j = 0; j < params.heads; ++j) {
        proj.keys.push_back(matmul(bank_features, params.w_k[j]));
        proj.values.push_back(matmul(bank_features, params.w_v[j]));
    }
    return proj;
}

void softmax_rows(Matrix& s) {
    for (std::size_t r = 0; r < s.rows(); ++r) {
        auto row = s.row(r);
        const double peak = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (auto& v : row) {
            v = std::exp(v - peak);
            total += v;
        }
        for (auto& v : row) v /= total;
    }
}

[[noreturn]] void non_finite(std::size_t block, const std::string& where) {
    fail(ErrorKind::numeric, "non-finite value in " + where + " of block " + std::to_string(block));
}

BlockForward forward_block(std::size_t index, std::span<const double> block, const FeatureBatch& batch,
                           const BankProjections& bank, const AttentionParams& params) {
    const std::size_t dm = params.d_model;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dm));

    BlockForward f;
    f.x = flatten_block(block, batch.h, batch.w, batch.c);
    const std::size_t positions = f.x.rows();
    f.concat = Matrix(positions, params.heads * dm);
    for (std::size_t j = 0; j < params.heads; ++j) {
        Matrix q = matmul(f.x, params.w_q[j]);
        Matrix s = matmul_bt(q, bank.keys[j]);
        for (auto& v : s.flat()) v *= scale;
        softmax_rows(s);
        if (!s.all_finite()) non_finite(index, "association of head " + std::to_string(j));
        const Matrix o = matmul(s, bank.values[j]);
        for (std::size_t r = 0; r < positions; ++r) {
            std::copy(o.row(r).begin(), o.row(r).end(), f.concat.row(r).begin() + static_cast<std::ptrdiff_t>(j * dm));
        }
        f.queries.push_back(std::move(q));
        f.assoc.push_back(std::move(s));
    }

    f.pre_norm = matmul(f.concat, params.w_o);
    auto pre = f.pre_norm.flat();
    auto x = f.x.flat();
    for (std::size_t i = 0; i < pre.size(); ++i) pre[i] = x[i] + pre[i];
    if (!f.pre_norm.all_finite()) non_finite(index, "residual sum");

    f.normed = Matrix(positions, batch.c);
    f.output = Matrix(positions, batch.c);
    f.inv_std.resize(positions);
    for (std::size_t r = 0; r < positions; ++r) {
        auto z = f.pre_norm.row(r);
        const auto mom = moments(z, params.eps);
        // An overflowed variance would silently flatten the row to the bias.
        if (!(mom.inv_std > 0.0) || !std::isfinite(mom.inv_std)) non_finite(index, "layer-norm variance");
        f.inv_std[r] = mom.inv_std;
        auto zhat = f.normed.row(r);
        auto y = f.output.row(r);
        for (std::size_t k = 0; k < z.size(); ++k) {
            zhat[k] = (z[k] - mom.mean) * mom.inv_std;
            y[k] = params.gain[k] * zhat[k] + params.bias[k];
        }
    }
    if (!f.output.all_finite()) non_finite(index, "layer norm");
    return f;
}

AttentionResult run(const FeatureBatch& batch, const Matrix& bank_features, const AttentionParams& params,
                    bool keep_trace) {
    check_inputs(batch, bank_features, params);
    const auto bank = project_bank(bank_features, params);
    AttentionResult result;
    result.output = batch;
    if (keep_trace) result.trace.blocks.reserve(batch.m);
    for (std::size_t i = 0; i < batch.m; ++i) {
        auto f = forward_block(i, batch.block(i), batch, bank, params);
        const auto flat = f.output.flat();
        std::copy(flat.begin(), flat.end(), result.output.block(i).begin());
        if (keep_trace) {
            result.trace.blocks.push_back({std::move(f.assoc), std::move(f.pre_norm), std::move(f.output)});
        }
    }
    return result;
}

}  // namespace

AttentionResult cross_attend(const FeatureBatch& batch, const Matrix& bank_features, const AttentionParams& params) {
    return run(batch, bank_features, params, true);
}

AttentionResult cross_attend(const FeatureBatch& batch, const KnowledgeBank& bank, const AttentionParams& params) {
    return run(batch, bank.f_k, params, true);
}

FeatureBatch complement(const FeatureBatch& batch, const Matrix& bank_features, const AttentionParams& params) {
    return run(batch, bank_features, params, false).output;
}

AttentionGradients attention_gradients(const FeatureBatch& batch, const Matrix& bank_features,
                                       const AttentionParams& params, std::span<const double> upstream) {
    check_inputs(batch, bank_features, params);
    if (upstream.size() != batch.data.size()) {
        fail(ErrorKind::dimension, "upstream cotangent has " + std::to_string(upstream.size()) +
                                       " values, expected " + std::to_string(batch.data.size()));
    }
    const std::size_t dm = params.d_model;
    const std::size_t c = params.channels;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dm));
    const auto bank = project_bank(bank_features, params);

    AttentionGradients g;
    for (std::size_t j = 0; j < params.heads; ++j) {
        g.w_q.emplace_back(c, dm);
        g.w_k.emplace_back(params.bank_dim, dm);
        g.w_v.emplace_back(params.bank_dim, dm);
    }
    g.w_o = Matrix(params.heads * dm, c);
    g.gain.assign(c, 0.0);
    g.bias.assign(c, 0.0);

    // Cotangents of the per-head bank projections, accumulated over blocks and
    // pulled back through the bank features once at the end.
    std::vector<Matrix> d_keys(params.heads, Matrix(bank_features.rows(), dm));
    std::vector<Matrix> d_values(params.heads, Matrix(bank_features.rows(), dm));

    for (std::size_t i = 0; i < batch.m; ++i) {
        const auto f = forward_block(i, batch.block(i), batch, bank, params);
        const std::size_t positions = f.x.rows();
        const Matrix up(positions, c,
                        std::vector<double>(upstream.begin() + static_cast<std::ptrdiff_t>(i * batch.block_size()),
                                            upstream.begin() + static_cast<std::ptrdiff_t>((i + 1) * batch.block_size())));

        // Layer norm: y = gain * zhat + bias, zhat = (z - mean) * inv_std.
        Matrix d_pre(positions, c);
        for (std::size_t r = 0; r < positions; ++r) {
            auto gy = up.row(r);
            auto zhat = f.normed.row(r);
            std::vector<double> d_zhat(c);
            double mean_d = 0.0;
            double mean_dz = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
                g.gain[k] += gy[k] * zhat[k];
                g.bias[k] += gy[k];
                d_zhat[k] = gy[k] * params.gain[k];
                mean_d += d_zhat[k];
                mean_dz += d_zhat[k] * zhat[k];
            }
            mean_d /= static_cast<double>(c);
            mean_dz /= static_cast<double>(c);
            auto dz = d_pre.row(r);
            for (std::size_t k = 0; k < c; ++k) dz[k] = f.inv_std[r] * (d_zhat[k] - mean_d - zhat[k] * mean_dz);
        }

        // pre_norm = x + concat * W_O; x carries no parameters.
        const Matrix gwo = matmul_at(f.concat, d_pre);
        for (std::size_t k = 0; k < gwo.size(); ++k) g.w_o.flat()[k] += gwo.flat()[k];
        const Matrix d_concat = matmul_bt(d_pre, params.w_o);

        for (std::size_t j = 0; j < params.heads; ++j) {
            Matrix d_out(positions, dm);
            for (std::size_t r = 0; r < positions; ++r) {
                auto src = d_concat.row(r).subspan(j * dm, dm);
                std::copy(src.begin(), src.end(), d_out.row(r).begin());
            }
            const Matrix& a = f.assoc[j];
            // out = A V
            Matrix d_a = matmul_bt(d_out, bank.values[j]);
            const Matrix dv = matmul_at(a, d_out);
            for (std::size_t k = 0; k < dv.size(); ++k) d_values[j].flat()[k] += dv.flat()[k];
            // A = softmax(S) row-wise, S = scale * Q K^T
            Matrix d_s(positions, a.cols());
            for (std::size_t r = 0; r < positions; ++r) {
                const double inner = dot(d_a.row(r), a.row(r));
                for (std::size_t n = 0; n < a.cols(); ++n) d_s(r, n) = scale * a(r, n) * (d_a(r, n) - inner);
            }
            const Matrix d_q = matmul(d_s, bank.keys[j]);
            const Matrix dk = matmul_at(d_s, f.queries[j]);
            for (std::size_t k = 0; k < dk.size(); ++k) d_keys[j].flat()[k] += dk.flat()[k];
            const Matrix gwq = matmul_at(f.x, d_q);
            for (std::size_t k = 0; k < gwq.size(); ++k) g.w_q[j].flat()[k] += gwq.flat()[k];
        }
    }

    for (std::size_t j = 0; j < params.heads; ++j) {
        g.w_k[j] = matmul_at(bank_features, d_keys[j]);
        g.w_v[j] = matmul_at(bank_features, d_values[j]);
    }
    return g;
}

void write_feature_batch(std::ostream& out, const FeatureBatch& batch) {
    batch.validate();
    out << "{\"mode\":\"" << to_string(batch.mode) << "\",\"m\":" << batch.m << ",\"h\":" << batch.h
        << ",\"w\":" << batch.w << ",\"c\":" << batch.c << ",\"data\":";
    json_io::write_array(out, batch.data);
    out << "}\n";
}

std::string serialize_feature_batch(const FeatureBatch& batch) {
    std::ostringstream ss;
    write_feature_batch(ss, batch);
    return ss.str();
}

void save_feature_batch(const FeatureBatch& batch, const std::string& path) {
    json_io::write_file(path, serialize_feature_batch(batch));
}

FeatureBatch parse_feature_batch(std::string_view text) {
    constexpr std::string_view ctx = "feature batch";
    const auto doc = json_io::parse_document(text, ctx);
    FeatureBatch b;
    const auto& mode = json_io::require(doc, "mode", ctx);
    if (!mode.is_string()) fail(ErrorKind::parse, "feature batch: 'mode' must be a string");
    const auto mode_text = mode.get<std::string>();
    if (mode_text == "proposal") {
        b.mode = FeatureMode::proposal;
    } else if (mode_text == "query") {
        b.mode = FeatureMode::query;
    } else {
        fail(ErrorKind::parse, "feature batch: unknown mode '" + mode_text + "'");
    }
    b.m = json_io::as_size(json_io::require(doc, "m", ctx), "feature batch 'm'");
    b.c = json_io::as_size(json_io::require(doc, "c", ctx), "feature batch 'c'");
    if (b.mode == FeatureMode::proposal || doc.contains("h")) {
        b.h = json_io::as_size(json_io::require(doc, "h", ctx), "feature batch 'h'");
    }
    if (b.mode == FeatureMode::proposal || doc.contains("w")) {
        b.w = json_io::as_size(json_io::require(doc, "w", ctx), "feature batch 'w'");
    }
    const auto& data = json_io::require(doc, "data", ctx);
    if (!data.is_array()) fail(ErrorKind::parse, "feature batch: 'data' must be an array");
    b.data.reserve(data.size());
    for (const auto& v : data) b.data.push_back(json_io::as_double(v, "feature batch 'data'"));
    b.validate();
    return b;
}

FeatureBatch load_feature_batch(const std::string& path) {
    const std::string text = json_io::read_file(path);
    try {
        return parse_feature_batch(text);
    } catch (const Error& e) {
        fail(e.kind(), path + ": " + e.what());
    }
}

void write_attention_params(std::ostream& out, const AttentionParams& params) {
    params.validate();
    out << "{\"heads\":" << params.heads << ",\"d_model\":" << params.d_model << ",\"channels\":" << params.channels
        << ",\"bank_dim\":" << params.bank_dim << ",\"eps\":";
    json_io::write_number(out, params.eps);
    auto per_head = [&](const char* key, const std::vector<Matrix>& ms) {
        out << ",\n\"" << key << "\":[";
        for (std::size_t j = 0; j < ms.size(); ++j) {
            if (j) out << ',';
            json_io::write_rows(out, ms[j]);
        }
        out << ']';
    };
    per_head("w_q", params.w_q);
    per_head("w_k", params.w_k);
    per_head("w_v", params.w_v);
    out << ",\n\"w_o\":";
    json_io::write_rows(out, params.w_o);
    out << ",\n\"gain\":";
    json_io::write_array(out, params.gain);
    out << ",\n\"bias\":";
    json_io::write_array(out, params.bias);
    out << "}\n";
}

void save_attention_params(const AttentionParams& params, const std::string& path) {
    std::ostringstream ss;
    write_attention_params(ss, params);
    json_io::write_file(path, ss.str());
}

AttentionParams parse_attention_params(std::string_view text) {
    constexpr std::string_view ctx = "attention params";
    const auto doc = json_io::parse_document(text, ctx);
    AttentionParams p;
    p.heads = json_io::as_size(json_io::require(doc, "heads", ctx), "attention params 'heads'");
    p.d_model = json_io::as_size(json_io::require(doc, "d_model", ctx), "attention params 'd_model'");
    p.channels = json_io::as_size(json_io::require(doc, "channels", ctx), "attention params 'channels'");
    p.bank_dim = json_io::as_size(json_io::require(doc, "bank_dim", ctx), "attention params 'bank_dim'");
    p.eps = json_io::as_double(json_io::require(doc, "eps", ctx), "attention params 'eps'");
    auto per_head = [&](const char* key, std::size_t rows, std::vector<Matrix>& dst) {
        const auto& arr = json_io::require(doc, key, ctx);
        if (!arr.is_array() || arr.size() != p.heads) {
            fail(ErrorKind::dimension, std::string("attention params '") + key + "' must hold one matrix per head");
        }
        for (const auto& m : arr) dst.push_back(json_io::as_matrix(m, rows, p.d_model, key));
    };
    per_head("w_q", p.channels, p.w_q);
    per_head("w_k", p.bank_dim, p.w_k);
    per_head("w_v", p.bank_dim, p.w_v);
    p.w_o = json_io::as_matrix(json_io::require(doc, "w_o", ctx), p.heads * p.d_model, p.channels, "w_o");
    for (const char* key : {"gain", "bias"}) {
        const auto& arr = json_io::require(doc, key, ctx);
        if (!arr.is_array()) fail(ErrorKind::parse, std::string("attention params '") + key + "' must be an array");
        auto& dst = std::string_view(key) == "gain" ? p.gain : p.bias;
        for (const auto& v : arr) dst.push_back(json_io::as_double(v, key));
    }
    p.validate();
    return p;
}

AttentionParams load_attention_params(const std::string& path) {
    const std::string text = json_io::read_file(path);
    try {
        return parse_attention_params(text);
    } catch (const Error& e) {
        fail(e.kind(), path + ": " + e.what());
    }
}

}  // namespace pkb
