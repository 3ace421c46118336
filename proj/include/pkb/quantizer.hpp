#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pkb/embeddings.hpp"
#include "pkb/matrix.hpp"

namespace pkb {

// N frozen centroids of dimension d. Rows are finite and pairwise distinct.
class Codebook {
public:
    explicit Codebook(Matrix centroids);

    std::size_t n() const noexcept { return centroids_.rows(); }
    std::size_t dim() const noexcept { return centroids_.cols(); }
    const Matrix& centroids() const noexcept { return centroids_; }
    std::span<const double> row(std::size_t i) const { return centroids_.row(i); }

private:
    Matrix centroids_;
};

struct KMeansConfig {
    std::size_t n = 50;
    std::size_t max_iters = 200;
    // Stop once an iteration improves the objective by less than this.
    double tol = 1e-6;
    std::uint64_t seed = 0;
};

struct KMeansResult {
    Codebook codebook;
    // objective[0] is measured on the seeded centroids; entry t on the
    // centroids after t update steps. Non-increasing.
    std::vector<double> objective;
    std::size_t iterations = 0;
};

// Lloyd iterations from k-means++ seeding under squared Euclidean distance.
// An emptied cluster is moved onto the point farthest from its own centroid.
KMeansResult kmeans(const Matrix& points, const KMeansConfig& config);
KMeansResult kmeans(const EmbeddingDataset& points, const KMeansConfig& config);

// Sum over points of the squared distance to the nearest centroid.
double kmeans_objective(const Matrix& points, const Matrix& centroids);

// Index of the codeword with the largest inner product with p; ties go to the
// lowest index.
std::size_t quantize(std::span<const double> p, const Codebook& codebook);

struct AssignmentReport {
    std::vector<std::size_t> counts;
    // groups[i] lists the ids assigned to codeword i, in dataset order.
    std::vector<std::vector<std::string>> groups;
};

AssignmentReport assignment_report(const EmbeddingDataset& dataset, const Codebook& codebook);

// Shannon entropy (nats) of the assignment distribution; 0 for no records.
double assignment_entropy(const AssignmentReport& report);

Matrix to_matrix(const EmbeddingDataset& dataset);

}  // namespace pkb
