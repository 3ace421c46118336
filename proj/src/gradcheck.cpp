#include "pkb/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "pkb/attention.hpp"
#include "pkb/hints.hpp"
#include "pkb/random.hpp"

namespace pkb {

double GradcheckReport::worst() const noexcept {
    double w = 0.0;
    for (const auto& g : groups) {
        if (std::isnan(g.max_rel_error)) return std::numeric_limits<double>::infinity();
        w = std::max(w, g.max_rel_error);
    }
    return w;
}

double group_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
    double diff = 0.0;
    double scale = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
        scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    if (diff == 0.0) return 0.0;
    return diff / scale;
}

namespace {

// Numeric gradient of `loss` with respect to every entry of `param`.
std::vector<double> central_differences(std::span<double> param, double step, const std::function<double()>& loss) {
    std::vector<double> out(param.size());
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double saved = param[i];
        param[i] = saved + step;
        const double up = loss();
        param[i] = saved - step;
        const double down = loss();
        param[i] = saved;
        out[i] = (up - down) / (2.0 * step);
    }
    return out;
}

void add_group(GradcheckReport& report, std::string name, std::vector<double> analytic,
               const std::vector<double>& numeric, bool flip) {
    if (flip) {
        for (auto& x : analytic) x = -x;
    }
    report.groups.push_back({std::move(name), group_relative_error(analytic, numeric), analytic.size()});
}

std::vector<double> concat(const std::vector<Matrix>& ms) {
    std::vector<double> out;
    for (const auto& m : ms) out.insert(out.end(), m.values().begin(), m.values().end());
    return out;
}

}  // namespace

GradcheckReport check_classifier_gradients(std::uint64_t seed, const ClassifierCheckSizes& sizes,
                                           const GradcheckOptions& options) {
    Rng rng(seed);
    Matrix centroids(sizes.n, sizes.dim);
    for (auto& x : centroids.flat()) x = rng.normal();
    const Codebook codebook(centroids);
    HintSet hints{Matrix(sizes.n, sizes.dim)};
    for (auto& x : hints.hints.flat()) x = 0.1 * rng.normal();
    ClassifierParams clf = init_classifier(sizes.dim, sizes.hidden, rng.next_u64());
    for (auto& b : clf.b1) b = 0.1 * rng.normal();
    clf.b2 = 0.1 * rng.normal();
    std::vector<double> probe(sizes.dim);
    for (auto& x : probe) x = rng.normal();
    const double label = static_cast<double>(rng.below(2));

    const auto cache = forward_classify(probe, codebook, hints, clf);
    const auto grads = backward(cache, clf, label);
    auto loss = [&] { return bce_loss(forward_classify(probe, codebook, hints, clf).logit, label); };
    const double h = options.step;

    GradcheckReport report;
    add_group(report, "w1", grads.w1.values(), central_differences(clf.w1.flat(), h, loss), false);
    add_group(report, "b1", grads.b1, central_differences(clf.b1, h, loss), false);
    add_group(report, "w2", grads.w2, central_differences(clf.w2, h, loss), false);
    add_group(report, "b2", {grads.b2}, central_differences(std::span<double>(&clf.b2, 1), h, loss), false);
    add_group(report, "hint", grads.hint, central_differences(hints.hints.row(grads.hint_row), h, loss),
              options.inject_sign_error);
    return report;
}

GradcheckReport check_attention_gradients(std::uint64_t seed, const AttentionCheckSizes& sizes,
                                          const GradcheckOptions& options) {
    Rng rng(seed);
    AttentionParams params = init_attention(sizes.c, sizes.d, sizes.d_model, sizes.heads, rng.next_u64());
    // Move the layer-norm affine away from identity so its gradients are generic.
    for (auto& g : params.gain) g = 1.0 + 0.2 * rng.normal();
    for (auto& b : params.bias) b = 0.2 * rng.normal();
    Matrix bank(sizes.n, sizes.d);
    for (auto& x : bank.flat()) x = rng.normal();
    std::vector<double> data(sizes.m * sizes.h * sizes.w * sizes.c);
    for (auto& x : data) x = rng.normal();
    const auto batch = FeatureBatch::proposals(sizes.m, sizes.h, sizes.w, sizes.c, std::move(data));
    std::vector<double> upstream(batch.data.size());
    for (auto& x : upstream) x = rng.normal();

    const auto grads = attention_gradients(batch, bank, params, upstream);
    auto loss = [&] {
        const auto out = complement(batch, bank, params);
        return dot(out.data, upstream);
    };
    const double h = options.step;
    auto per_head = [&](std::vector<Matrix>& ms) {
        std::vector<double> out;
        for (auto& m : ms) {
            const auto part = central_differences(m.flat(), h, loss);
            out.insert(out.end(), part.begin(), part.end());
        }
        return out;
    };

    GradcheckReport report;
    add_group(report, "W_Q", concat(grads.w_q), per_head(params.w_q), false);
    add_group(report, "W_K", concat(grads.w_k), per_head(params.w_k), false);
    add_group(report, "W_V", concat(grads.w_v), per_head(params.w_v), false);
    add_group(report, "W_O", grads.w_o.values(), central_differences(params.w_o.flat(), h, loss),
              options.inject_sign_error);
    add_group(report, "ln_gain", grads.gain, central_differences(params.gain, h, loss), false);
    add_group(report, "ln_bias", grads.bias, central_differences(params.bias, h, loss), false);
    return report;
}

}  // namespace pkb
