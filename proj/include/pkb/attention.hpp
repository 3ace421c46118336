#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pkb/bank.hpp"
#include "pkb/matrix.hpp"

namespace pkb {

enum class FeatureMode { proposal, query };

const char* to_string(FeatureMode mode) noexcept;

// M feature blocks stored back to back. A proposal block is h x w x c in
// (y, x, channel) row-major order; a query block is 1 x c (h = w = 1).
struct FeatureBatch {
    FeatureMode mode = FeatureMode::query;
    std::size_t m = 0;
    std::size_t h = 1;
    std::size_t w = 1;
    std::size_t c = 0;
    std::vector<double> data;

    static FeatureBatch proposals(std::size_t m, std::size_t h, std::size_t w, std::size_t c,
                                  std::vector<double> data);
    static FeatureBatch queries(std::size_t m, std::size_t c, std::vector<double> data);

    std::size_t positions() const noexcept { return h * w; }
    std::size_t block_size() const noexcept { return h * w * c; }
    std::span<const double> block(std::size_t i) const { return {data.data() + i * block_size(), block_size()}; }
    std::span<double> block(std::size_t i) { return {data.data() + i * block_size(), block_size()}; }

    // Throws on inconsistent shape or non-finite data.
    void validate() const;

    friend bool operator==(const FeatureBatch&, const FeatureBatch&) = default;
};

// Row (y * w + x) of the result is position (y, x) of the block.
Matrix flatten_block(std::span<const double> block, std::size_t h, std::size_t w, std::size_t c);
std::vector<double> unflatten_block(const Matrix& flat);

struct AttentionParams {
    std::size_t heads = 0;
    std::size_t d_model = 0;
    std::size_t channels = 0;   // c
    std::size_t bank_dim = 0;   // d
    std::vector<Matrix> w_q;    // per head, c x d_model
    std::vector<Matrix> w_k;    // per head, d x d_model
    std::vector<Matrix> w_v;    // per head, d x d_model
    Matrix w_o;                 // (heads * d_model) x c, shared over heads
    std::vector<double> gain;   // c
    std::vector<double> bias;   // c
    double eps = 1e-5;

    void validate() const;

    friend bool operator==(const AttentionParams&, const AttentionParams&) = default;
};

// Weights Gaussian with standard deviation 1/sqrt(fan-in); gain 1, bias 0.
AttentionParams init_attention(std::size_t channels, std::size_t bank_dim, std::size_t d_model, std::size_t heads,
                               std::uint64_t seed);

std::vector<double> layer_norm(std::span<const double> row, std::span<const double> gain,
                               std::span<const double> bias, double eps);

struct BlockTrace {
    std::vector<Matrix> association;  // per head, positions x N; rows sum to 1
    Matrix pre_norm;                  // flattened input + attention output
    Matrix output;                    // layer_norm(pre_norm)
};

struct AttentionTrace {
    std::vector<BlockTrace> blocks;
};

struct AttentionResult {
    FeatureBatch output;
    AttentionTrace trace;
};

// Multi-head cross-attention of every block against the bank rows, followed
// by the residual sum and layer normalization. `bank_features` is N x d.
AttentionResult cross_attend(const FeatureBatch& batch, const Matrix& bank_features, const AttentionParams& params);
AttentionResult cross_attend(const FeatureBatch& batch, const KnowledgeBank& bank, const AttentionParams& params);

// Same output as cross_attend without retaining the trace.
FeatureBatch complement(const FeatureBatch& batch, const Matrix& bank_features, const AttentionParams& params);

struct AttentionGradients {
    std::vector<Matrix> w_q;
    std::vector<Matrix> w_k;
    std::vector<Matrix> w_v;
    Matrix w_o;
    std::vector<double> gain;
    std::vector<double> bias;
};

// Gradients of sum(upstream * output) with respect to every parameter.
// `upstream` has the layout of the output batch data.
AttentionGradients attention_gradients(const FeatureBatch& batch, const Matrix& bank_features,
                                       const AttentionParams& params, std::span<const double> upstream);

void write_feature_batch(std::ostream& out, const FeatureBatch& batch);
std::string serialize_feature_batch(const FeatureBatch& batch);
void save_feature_batch(const FeatureBatch& batch, const std::string& path);
FeatureBatch parse_feature_batch(std::string_view text);
FeatureBatch load_feature_batch(const std::string& path);

void write_attention_params(std::ostream& out, const AttentionParams& params);
void save_attention_params(const AttentionParams& params, const std::string& path);
AttentionParams parse_attention_params(std::string_view text);
AttentionParams load_attention_params(const std::string& path);

}  // namespace pkb
