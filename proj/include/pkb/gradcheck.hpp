#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pkb {

// Central finite differences against the analytic gradients. The error of a
// parameter group is max_i |analytic_i - numeric_i| / max_i max(|analytic_i|,
// |numeric_i|), i.e. relative to the group's gradient scale.
struct GroupError {
    std::string group;
    double max_rel_error = 0.0;
    std::size_t coords = 0;
};

struct GradcheckReport {
    std::vector<GroupError> groups;

    double worst() const noexcept;
    bool passed(double threshold) const noexcept { return worst() < threshold; }
};

struct GradcheckOptions {
    double step = 1e-5;
    // Flips the sign of one analytic group; used to prove the checker fires.
    bool inject_sign_error = false;
};

struct ClassifierCheckSizes {
    std::size_t n = 4;
    std::size_t dim = 8;
    std::size_t hidden = 4;
};

struct AttentionCheckSizes {
    std::size_t m = 2;
    std::size_t h = 2;
    std::size_t w = 2;
    std::size_t c = 8;
    std::size_t n = 4;
    std::size_t d = 8;
    std::size_t d_model = 4;
    std::size_t heads = 2;
};

double group_relative_error(std::span<const double> analytic, std::span<const double> numeric);

GradcheckReport check_classifier_gradients(std::uint64_t seed, const ClassifierCheckSizes& sizes = {},
                                           const GradcheckOptions& options = {});
GradcheckReport check_attention_gradients(std::uint64_t seed, const AttentionCheckSizes& sizes = {},
                                          const GradcheckOptions& options = {});

}  // namespace pkb
