#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace pkb {

enum class Label { pedestrian, background };

const char* to_string(Label label) noexcept;
Label parse_label(std::string_view text);

struct EmbeddingRecord {
    std::string id;
    Label label = Label::pedestrian;
    std::vector<double> vector;

    friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

// Ordered, validated collection of records sharing one dimension. An empty
// dataset has dim 0 unless a dimension is given explicitly.
class EmbeddingDataset {
public:
    EmbeddingDataset() = default;
    // Throws if a record's length differs from dim, a coordinate is not
    // finite, or an id repeats.
    EmbeddingDataset(std::size_t dim, std::vector<EmbeddingRecord> records);

    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return records_.size(); }
    bool empty() const noexcept { return records_.empty(); }
    const std::vector<EmbeddingRecord>& records() const noexcept { return records_; }
    const EmbeddingRecord& operator[](std::size_t i) const { return records_[i]; }

    std::size_t count(Label label) const noexcept;

    friend bool operator==(const EmbeddingDataset&, const EmbeddingDataset&) = default;

private:
    std::size_t dim_ = 0;
    std::vector<EmbeddingRecord> records_;
};

struct ParseOptions {
    // L2-normalize every vector at ingestion.
    bool normalize = false;
};

// JSON-lines reader. Blank lines are skipped; errors name the 1-based line.
EmbeddingDataset parse_embeddings(std::istream& in, const ParseOptions& options = {});
EmbeddingDataset parse_embedding_file(const std::string& path, const ParseOptions& options = {});

// One JSON object per line, numbers in shortest round-trip form.
void write_embeddings(std::ostream& out, const EmbeddingDataset& dataset);
void save_embedding_file(const EmbeddingDataset& dataset, const std::string& path);

struct LabelSplit {
    EmbeddingDataset pedestrians;
    EmbeddingDataset backgrounds;
};

// Both parts keep the input's dim and relative order.
LabelSplit split_by_label(const EmbeddingDataset& dataset);

std::vector<double> l2_normalize(std::span<const double> v);

// Gaussian pedestrian/background clusters. Pedestrians are centred at
// +separation/2 along the unit diagonal u = (1, ..., 1)/sqrt(dim), backgrounds
// at -separation/2; every coordinate has unit-variance noise. The cluster
// geometry does not depend on the seed, so sets drawn with different seeds
// act as train/held-out splits of the same distribution.
struct SyntheticConfig {
    std::uint64_t seed = 0;
    std::size_t pedestrians = 600;
    std::size_t backgrounds = 400;
    std::size_t dim = 512;
    double separation = 20.0;
};

EmbeddingDataset generate_synthetic(const SyntheticConfig& config);

}  // namespace pkb
