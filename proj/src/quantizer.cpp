#include "pkb/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pkb/error.hpp"
#include "pkb/random.hpp"

namespace pkb {

Codebook::Codebook(Matrix centroids) : centroids_(std::move(centroids)) {
    if (centroids_.rows() == 0 || centroids_.cols() == 0) {
        fail(ErrorKind::precondition, "codebook must have at least one row and column");
    }
    if (!centroids_.all_finite()) fail(ErrorKind::numeric, "codebook has a non-finite coordinate");
    std::vector<std::size_t> order(centroids_.rows());
    std::iota(order.begin(), order.end(), 0);
    auto row_less = [&](std::size_t a, std::size_t b) {
        auto ra = centroids_.row(a);
        auto rb = centroids_.row(b);
        return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
    };
    std::sort(order.begin(), order.end(), row_less);
    for (std::size_t i = 1; i < order.size(); ++i) {
        if (!row_less(order[i - 1], order[i])) {
            fail(ErrorKind::invariant, "codebook rows " + std::to_string(order[i - 1]) + " and " +
                                           std::to_string(order[i]) + " are identical");
        }
    }
}

Matrix to_matrix(const EmbeddingDataset& dataset) {
    Matrix m(dataset.size(), dataset.dim());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        std::copy(dataset[i].vector.begin(), dataset[i].vector.end(), m.row(i).begin());
    }
    return m;
}

namespace {

std::size_t count_distinct_rows(const Matrix& points) {
    std::vector<std::size_t> order(points.rows());
    std::iota(order.begin(), order.end(), 0);
    auto row_less = [&](std::size_t a, std::size_t b) {
        auto ra = points.row(a);
        auto rb = points.row(b);
        return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
    };
    std::sort(order.begin(), order.end(), row_less);
    std::size_t distinct = order.empty() ? 0 : 1;
    for (std::size_t i = 1; i < order.size(); ++i) distinct += row_less(order[i - 1], order[i]);
    return distinct;
}

struct Nearest {
    std::size_t index;
    double dist2;
};

Nearest nearest_centroid(std::span<const double> p, const Matrix& centroids) {
    Nearest best{0, std::numeric_limits<double>::infinity()};
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        const double d2 = squared_distance(p, centroids.row(c));
        if (d2 < best.dist2) best = {c, d2};
    }
    return best;
}

Matrix seed_plus_plus(const Matrix& points, std::size_t k, Rng& rng) {
    const std::size_t n = points.rows();
    Matrix centroids(k, points.cols());
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());

    std::size_t pick = rng.below(n);
    for (std::size_t c = 0; c < k; ++c) {
        std::copy(points.row(pick).begin(), points.row(pick).end(), centroids.row(c).begin());
        if (c + 1 == k) break;
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], squared_distance(points.row(i), centroids.row(c)));
            total += d2[i];
        }
        // total > 0 because at least k distinct points exist.
        const double target = rng.uniform() * total;
        double acc = 0.0;
        pick = n;
        std::size_t last_positive = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (d2[i] <= 0.0) continue;
            last_positive = i;
            acc += d2[i];
            if (acc > target) {
                pick = i;
                break;
            }
        }
        if (pick == n) pick = last_positive;
    }
    return centroids;
}

}  // namespace

double kmeans_objective(const Matrix& points, const Matrix& centroids) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.rows(); ++i) total += nearest_centroid(points.row(i), centroids).dist2;
    return total;
}

KMeansResult kmeans(const Matrix& points, const KMeansConfig& config) {
    if (config.n == 0) fail(ErrorKind::precondition, "k-means needs n >= 1");
    if (config.max_iters == 0) fail(ErrorKind::precondition, "k-means needs max_iters >= 1");
    if (!(config.tol >= 0.0)) fail(ErrorKind::precondition, "k-means tolerance must be nonnegative");
    if (!points.all_finite()) fail(ErrorKind::numeric, "k-means input has a non-finite coordinate");
    const std::size_t distinct = count_distinct_rows(points);
    if (distinct < config.n) {
        fail(ErrorKind::precondition, "k-means needs at least " + std::to_string(config.n) +
                                          " distinct points, found " + std::to_string(distinct));
    }

    const std::size_t n = points.rows();
    const std::size_t dim = points.cols();
    const std::size_t k = config.n;
    Rng rng(config.seed);
    Matrix centroids = seed_plus_plus(points, k, rng);

    std::vector<std::size_t> assign(n);
    std::vector<double> dist2(n);
    auto assign_all = [&](const Matrix& cents) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto nc = nearest_centroid(points.row(i), cents);
            assign[i] = nc.index;
            dist2[i] = nc.dist2;
            total += nc.dist2;
        }
        return total;
    };

    KMeansResult result{Codebook(centroids), {}, 0};
    double objective = assign_all(centroids);
    result.objective.push_back(objective);

    for (std::size_t iter = 0; iter < config.max_iters; ++iter) {
        Matrix next(k, dim);
        std::vector<std::size_t> sizes(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            auto dst = next.row(assign[i]);
            auto src = points.row(i);
            for (std::size_t j = 0; j < dim; ++j) dst[j] += src[j];
            ++sizes[assign[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (sizes[c] == 0) continue;
            const double inv = static_cast<double>(sizes[c]);
            for (auto& x : next.row(c)) x /= inv;
        }

        // Reseed empty clusters with the worst-fit points, farthest first.
        std::vector<std::size_t> by_misfit;
        for (std::size_t c = 0; c < k; ++c) {
            if (sizes[c] != 0) continue;
            if (by_misfit.empty()) {
                by_misfit.resize(n);
                std::iota(by_misfit.begin(), by_misfit.end(), 0);
                std::stable_sort(by_misfit.begin(), by_misfit.end(),
                                 [&](std::size_t a, std::size_t b) { return dist2[a] > dist2[b]; });
            }
            for (std::size_t cand : by_misfit) {
                if (dist2[cand] <= 0.0) break;
                bool taken = false;
                for (std::size_t o = 0; o < k && !taken; ++o) {
                    if (o == c || (sizes[o] == 0 && o > c)) continue;
                    taken = squared_distance(points.row(cand), next.row(o)) == 0.0;
                }
                if (taken) continue;
                std::copy(points.row(cand).begin(), points.row(cand).end(), next.row(c).begin());
                dist2[cand] = 0.0;
                sizes[c] = 1;
                break;
            }
            if (sizes[c] == 0) std::copy(centroids.row(c).begin(), centroids.row(c).end(), next.row(c).begin());
        }

        const double next_objective = kmeans_objective(points, next);
        // The mean update cannot raise the objective in exact arithmetic; a
        // rounding-level rise means the previous centroids are the fixed point.
        if (next_objective > objective) break;
        const double improvement = objective - next_objective;
        centroids = std::move(next);
        objective = assign_all(centroids);
        result.objective.push_back(objective);
        result.iterations = iter + 1;
        if (improvement < config.tol) break;
    }

    result.codebook = Codebook(std::move(centroids));
    return result;
}

KMeansResult kmeans(const EmbeddingDataset& points, const KMeansConfig& config) {
    return kmeans(to_matrix(points), config);
}

std::size_t quantize(std::span<const double> p, const Codebook& codebook) {
    if (p.size() != codebook.dim()) {
        fail(ErrorKind::dimension, "probe has dimension " + std::to_string(p.size()) + ", codebook expects " +
                                       std::to_string(codebook.dim()));
    }
    std::size_t best = 0;
    double best_score = dot(codebook.row(0), p);
    for (std::size_t i = 1; i < codebook.n(); ++i) {
        const double s = dot(codebook.row(i), p);
        if (s > best_score) {
            best_score = s;
            best = i;
        }
    }
    return best;
}

AssignmentReport assignment_report(const EmbeddingDataset& dataset, const Codebook& codebook) {
    AssignmentReport report{std::vector<std::size_t>(codebook.n(), 0),
                            std::vector<std::vector<std::string>>(codebook.n())};
    if (dataset.empty()) return report;
    if (dataset.dim() != codebook.dim()) {
        fail(ErrorKind::dimension, "dataset dimension " + std::to_string(dataset.dim()) +
                                       " does not match codebook dimension " + std::to_string(codebook.dim()));
    }
    for (const auto& r : dataset.records()) {
        const std::size_t i = quantize(r.vector, codebook);
        ++report.counts[i];
        report.groups[i].push_back(r.id);
    }
    return report;
}

double assignment_entropy(const AssignmentReport& report) {
    const double total = static_cast<double>(std::accumulate(report.counts.begin(), report.counts.end(), std::size_t{0}));
    if (total == 0.0) return 0.0;
    double h = 0.0;
    for (std::size_t c : report.counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / total;
        h -= p * std::log(p);
    }
    return h;
}

}  // namespace pkb
