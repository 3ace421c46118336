#include "pkb/hints.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "pkb/error.hpp"
#include "pkb/json_io.hpp"
#include "pkb/random.hpp"

namespace pkb {

HintSet init_hints(std::size_t n, std::size_t dim, std::uint64_t seed) {
    if (n == 0 || dim == 0) fail(ErrorKind::precondition, "hint set needs n >= 1 and dim >= 1");
    Rng rng(seed);
    HintSet h{Matrix(n, dim)};
    for (auto& x : h.hints.flat()) x = 0.01 * rng.normal();
    return h;
}

Matrix compose(const Codebook& codebook, const HintSet& hints) {
    if (hints.n() != codebook.n() || hints.dim() != codebook.dim()) {
        fail(ErrorKind::dimension, "hint shape " + std::to_string(hints.n()) + "x" + std::to_string(hints.dim()) +
                                       " does not match codebook " + std::to_string(codebook.n()) + "x" +
                                       std::to_string(codebook.dim()));
    }
    Matrix out = codebook.centroids();
    auto dst = out.flat();
    auto src = hints.hints.flat();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    return out;
}

ClassifierParams init_classifier(std::size_t dim, std::size_t hidden, std::uint64_t seed) {
    if (dim == 0 || hidden == 0) fail(ErrorKind::precondition, "classifier needs dim >= 1 and hidden >= 1");
    Rng rng(seed);
    ClassifierParams p;
    p.w1 = Matrix(hidden, dim);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(dim));
    for (auto& x : p.w1.flat()) x = s1 * rng.normal();
    p.b1.assign(hidden, 0.0);
    p.w2.resize(hidden);
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (auto& x : p.w2) x = s2 * rng.normal();
    p.b2 = 0.0;
    return p;
}

ForwardCache classify_feature(std::span<const double> feature, std::size_t index,
                              const ClassifierParams& classifier) {
    if (feature.size() != classifier.dim()) {
        fail(ErrorKind::dimension, "classifier expects dimension " + std::to_string(classifier.dim()) + ", got " +
                                       std::to_string(feature.size()));
    }
    ForwardCache cache;
    cache.index = index;
    cache.feature.assign(feature.begin(), feature.end());
    const std::size_t hidden = classifier.hidden();
    cache.pre.resize(hidden);
    cache.act.resize(hidden);
    double logit = classifier.b2;
    for (std::size_t j = 0; j < hidden; ++j) {
        cache.pre[j] = dot(classifier.w1.row(j), feature) + classifier.b1[j];
        cache.act[j] = std::max(0.0, cache.pre[j]);
        logit += classifier.w2[j] * cache.act[j];
    }
    cache.logit = logit;
    return cache;
}

ForwardCache forward_classify(std::span<const double> p, const Codebook& codebook, const HintSet& hints,
                              const ClassifierParams& classifier) {
    const std::size_t n = quantize(p, codebook);
    if (hints.n() != codebook.n() || hints.dim() != codebook.dim()) {
        fail(ErrorKind::dimension, "hint shape does not match codebook");
    }
    std::vector<double> feature(codebook.dim());
    auto q = codebook.row(n);
    auto h = hints.hints.row(n);
    for (std::size_t j = 0; j < feature.size(); ++j) feature[j] = q[j] + h[j];
    return classify_feature(feature, n, classifier);
}

double bce_loss(double logit, double label) {
    const double softplus = std::max(logit, 0.0) + std::log1p(std::exp(-std::abs(logit)));
    return softplus - label * logit;
}

double bce_grad(double logit, double label) {
    const double sig = logit >= 0.0 ? 1.0 / (1.0 + std::exp(-logit)) : std::exp(logit) / (1.0 + std::exp(logit));
    return sig - label;
}

ClassifierGradients backward(const ForwardCache& cache, const ClassifierParams& classifier, double label) {
    const std::size_t hidden = classifier.hidden();
    const std::size_t dim = classifier.dim();
    const double dlogit = bce_grad(cache.logit, label);

    ClassifierGradients g;
    g.b2 = dlogit;
    g.w2.resize(hidden);
    g.b1.resize(hidden);
    g.w1 = Matrix(hidden, dim);
    g.hint_row = cache.index;
    g.hint.assign(dim, 0.0);
    for (std::size_t j = 0; j < hidden; ++j) {
        g.w2[j] = dlogit * cache.act[j];
        const double dpre = cache.pre[j] > 0.0 ? dlogit * classifier.w2[j] : 0.0;
        g.b1[j] = dpre;
        if (dpre == 0.0) continue;
        auto gw = g.w1.row(j);
        auto w = classifier.w1.row(j);
        for (std::size_t k = 0; k < dim; ++k) {
            gw[k] = dpre * cache.feature[k];
            g.hint[k] += dpre * w[k];
        }
    }
    return g;
}

double TrainHistory::tail_mean_loss(std::size_t window) const {
    if (steps.empty()) return 0.0;
    const std::size_t count = std::min(window, steps.size());
    double s = 0.0;
    for (std::size_t i = steps.size() - count; i < steps.size(); ++i) s += steps[i].loss;
    return s / static_cast<double>(count);
}

std::uint64_t hint_init_seed(std::uint64_t seed) { return derive_seed(seed, 0); }
std::uint64_t classifier_init_seed(std::uint64_t seed) { return derive_seed(seed, 1); }
std::uint64_t sampling_seed(std::uint64_t seed) { return derive_seed(seed, 2); }

HintSet initial_hints(const Codebook& codebook, const TrainConfig& config) {
    return init_hints(codebook.n(), codebook.dim(), hint_init_seed(config.seed));
}

namespace {

void accumulate(ClassifierGradients& into, const ClassifierGradients& g) {
    auto a = into.w1.flat();
    auto b = g.w1.flat();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    for (std::size_t j = 0; j < into.b1.size(); ++j) {
        into.b1[j] += g.b1[j];
        into.w2[j] += g.w2[j];
    }
    into.b2 += g.b2;
}

void apply(ClassifierParams& p, const ClassifierGradients& g, double lr) {
    auto w = p.w1.flat();
    auto gw = g.w1.flat();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * gw[i];
    for (std::size_t j = 0; j < p.b1.size(); ++j) {
        p.b1[j] -= lr * g.b1[j];
        p.w2[j] -= lr * g.w2[j];
    }
    p.b2 -= lr * g.b2;
}

}  // namespace

TrainStep sgd_step(std::span<const double> pedestrian, std::span<const double> background,
                   const Codebook& codebook, HintSet& hints, ClassifierParams& classifier, double lr,
                   bool update_hints) {
    // Both samples see the same parameters; their gradients are summed.
    const auto fp = forward_classify(pedestrian, codebook, hints, classifier);
    const auto fb = forward_classify(background, codebook, hints, classifier);

    TrainStep step;
    step.pedestrian = {Label::pedestrian, fp.index, bce_loss(fp.logit, 1.0)};
    step.background = {Label::background, fb.index, bce_loss(fb.logit, 0.0)};
    step.loss = step.pedestrian.loss + step.background.loss;
    if (!std::isfinite(step.loss)) return step;

    auto gp = backward(fp, classifier, 1.0);
    const auto gb = backward(fb, classifier, 0.0);
    if (update_hints) {
        std::vector<double> hint_p = gp.hint;
        if (gp.hint_row == gb.hint_row) {
            for (std::size_t k = 0; k < hint_p.size(); ++k) hint_p[k] += gb.hint[k];
        } else {
            auto row = hints.hints.row(gb.hint_row);
            for (std::size_t k = 0; k < row.size(); ++k) row[k] -= lr * gb.hint[k];
        }
        auto row = hints.hints.row(gp.hint_row);
        for (std::size_t k = 0; k < row.size(); ++k) row[k] -= lr * hint_p[k];
    }
    accumulate(gp, gb);
    apply(classifier, gp, lr);
    return step;
}

TrainResult train_hints(const EmbeddingDataset& pedestrians, const EmbeddingDataset& backgrounds,
                        const Codebook& codebook, const TrainConfig& config) {
    if (pedestrians.empty()) fail(ErrorKind::precondition, "hint training needs at least one pedestrian record");
    if (backgrounds.empty()) fail(ErrorKind::precondition, "hint training needs at least one background record");
    if (pedestrians.dim() != codebook.dim() || backgrounds.dim() != codebook.dim()) {
        fail(ErrorKind::dimension, "embedding dimension does not match codebook dimension " +
                                       std::to_string(codebook.dim()));
    }
    if (!(config.lr > 0.0) || !std::isfinite(config.lr)) fail(ErrorKind::precondition, "learning rate must be positive");
    if (config.steps == 0) fail(ErrorKind::precondition, "training needs at least one step");
    if (config.hidden == 0) fail(ErrorKind::precondition, "hidden width must be positive");

    TrainResult result{initial_hints(codebook, config),
                       init_classifier(codebook.dim(), config.hidden, classifier_init_seed(config.seed)),
                       {}};
    result.history.steps.reserve(config.steps);
    Rng rng(sampling_seed(config.seed));

    for (std::size_t s = 0; s < config.steps; ++s) {
        const auto& p = pedestrians[rng.below(pedestrians.size())];
        const auto& b = backgrounds[rng.below(backgrounds.size())];
        auto step = sgd_step(p.vector, b.vector, codebook, result.hints, result.classifier, config.lr,
                             config.train_hints);
        step.step = s;
        if (!std::isfinite(step.loss)) {
            fail(ErrorKind::numeric, "non-finite loss at step " + std::to_string(s) + " (pedestrian '" + p.id +
                                         "', background '" + b.id + "')");
        }
        result.history.steps.push_back(step);
    }
    return result;
}

double classification_accuracy(const EmbeddingDataset& dataset, const Codebook& codebook, const HintSet& hints,
                               const ClassifierParams& classifier) {
    if (dataset.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& r : dataset.records()) {
        const bool predicted_pedestrian = forward_classify(r.vector, codebook, hints, classifier).logit > 0.0;
        correct += predicted_pedestrian == (r.label == Label::pedestrian);
    }
    return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

void write_history(std::ostream& out, const TrainHistory& history) {
    auto sample = [&](const SampleRecord& r) {
        out << "{\"label\":\"" << to_string(r.label) << "\",\"index\":" << r.index << ",\"loss\":";
        json_io::write_number(out, r.loss);
        out << '}';
    };
    for (const auto& s : history.steps) {
        out << "{\"step\":" << s.step << ",\"loss\":";
        json_io::write_number(out, s.loss);
        out << ",\"samples\":[";
        sample(s.pedestrian);
        out << ',';
        sample(s.background);
        out << "]}\n";
    }
}

}  // namespace pkb
