#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "pkb/embeddings.hpp"
#include "pkb/matrix.hpp"
#include "pkb/quantizer.hpp"

namespace pkb {

// Learnable additive offsets, one row per codeword.
struct HintSet {
    Matrix hints;

    std::size_t n() const noexcept { return hints.rows(); }
    std::size_t dim() const noexcept { return hints.cols(); }
    friend bool operator==(const HintSet&, const HintSet&) = default;
};

// Zero-mean Gaussian entries with standard deviation 0.01.
HintSet init_hints(std::size_t n, std::size_t dim, std::uint64_t seed);

// Element-wise f_q + f_h.
Matrix compose(const Codebook& codebook, const HintSet& hints);

// logit = w2 . relu(w1 x + b1) + b2
struct ClassifierParams {
    Matrix w1;               // hidden x d
    std::vector<double> b1;  // hidden
    std::vector<double> w2;  // hidden
    double b2 = 0.0;

    std::size_t hidden() const noexcept { return w1.rows(); }
    std::size_t dim() const noexcept { return w1.cols(); }
    friend bool operator==(const ClassifierParams&, const ClassifierParams&) = default;
};

// Zero biases; weights Gaussian with standard deviation 1/sqrt(fan-in).
ClassifierParams init_classifier(std::size_t dim, std::size_t hidden, std::uint64_t seed);

struct ForwardCache {
    std::size_t index = 0;         // selected codeword
    std::vector<double> feature;   // f_k row fed to the classifier
    std::vector<double> pre;       // w1 x + b1
    std::vector<double> act;       // relu(pre)
    double logit = 0.0;
};

ForwardCache forward_classify(std::span<const double> p, const Codebook& codebook, const HintSet& hints,
                              const ClassifierParams& classifier);

// The classifier head on an already composed feature row.
ForwardCache classify_feature(std::span<const double> feature, std::size_t index,
                              const ClassifierParams& classifier);

// softplus(logit) - label * logit, evaluated without overflow.
double bce_loss(double logit, double label);
// d bce / d logit = sigmoid(logit) - label.
double bce_grad(double logit, double label);

struct ClassifierGradients {
    Matrix w1;
    std::vector<double> b1;
    std::vector<double> w2;
    double b2 = 0.0;
    std::size_t hint_row = 0;
    std::vector<double> hint;  // gradient for f_h[hint_row]; other rows are zero
};

ClassifierGradients backward(const ForwardCache& cache, const ClassifierParams& classifier, double label);

struct TrainConfig {
    double lr = 0.1;
    std::size_t steps = 2000;
    std::uint64_t seed = 0;
    std::size_t hidden = 128;
    bool train_hints = true;
};

struct SampleRecord {
    Label label = Label::pedestrian;
    std::size_t index = 0;
    double loss = 0.0;
};

struct TrainStep {
    std::size_t step = 0;
    double loss = 0.0;  // pedestrian + background loss
    SampleRecord pedestrian;
    SampleRecord background;
};

struct TrainHistory {
    std::vector<TrainStep> steps;

    std::size_t size() const noexcept { return steps.size(); }
    // Mean total loss over the last `window` steps (all steps if fewer).
    double tail_mean_loss(std::size_t window) const;
};

struct TrainResult {
    HintSet hints;
    ClassifierParams classifier;
    TrainHistory history;
};

// Seeds used by train_hints, exposed so callers can reproduce the starting
// state (the hints-off ablation returns exactly initial_hints()).
std::uint64_t hint_init_seed(std::uint64_t seed);
std::uint64_t classifier_init_seed(std::uint64_t seed);
std::uint64_t sampling_seed(std::uint64_t seed);
HintSet initial_hints(const Codebook& codebook, const TrainConfig& config);

// Each step draws one pedestrian and one background uniformly, sums their
// losses and applies one SGD update to the classifier and, when
// config.train_hints is set, to the hint rows the two samples selected.
TrainResult train_hints(const EmbeddingDataset& pedestrians, const EmbeddingDataset& backgrounds,
                        const Codebook& codebook, const TrainConfig& config);

// Applies one SGD update in place; returns the step record.
TrainStep sgd_step(std::span<const double> pedestrian, std::span<const double> background,
                   const Codebook& codebook, HintSet& hints, ClassifierParams& classifier, double lr,
                   bool update_hints);

// Fraction of records whose predicted label (logit > 0 means pedestrian)
// matches the record label.
double classification_accuracy(const EmbeddingDataset& dataset, const Codebook& codebook, const HintSet& hints,
                               const ClassifierParams& classifier);

// One JSON object per step.
void write_history(std::ostream& out, const TrainHistory& history);

}  // namespace pkb
