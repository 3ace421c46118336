#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <string>

#include "pkb/hints.hpp"
#include "pkb/matrix.hpp"
#include "pkb/quantizer.hpp"

namespace pkb {

inline constexpr int kBankFormatVersion = 1;

// The knowledge bank artifact: frozen centroids f_q, hints f_h and their sum
// f_k, stored redundantly so a reader can detect a tampered f_k.
struct KnowledgeBank {
    int version = kBankFormatVersion;
    Matrix f_q;
    Matrix f_h;
    Matrix f_k;
    std::map<std::string, std::string> meta;

    std::size_t n() const noexcept { return f_q.rows(); }
    std::size_t dim() const noexcept { return f_q.cols(); }
    Codebook codebook() const { return Codebook(f_q); }

    friend bool operator==(const KnowledgeBank&, const KnowledgeBank&) = default;
};

KnowledgeBank make_bank(const Codebook& codebook, const HintSet& hints, std::map<std::string, std::string> meta = {});

// Throws ErrorKind::invariant on shape mismatch, non-finite data or
// f_k != f_q + f_h in any coordinate, and ErrorKind::version on an
// unsupported version.
void validate(const KnowledgeBank& bank);

void write_bank(std::ostream& out, const KnowledgeBank& bank);
std::string serialize_bank(const KnowledgeBank& bank);
void save_bank(const KnowledgeBank& bank, const std::string& path);

KnowledgeBank parse_bank(std::string_view text);
KnowledgeBank load_bank(const std::string& path);

}  // namespace pkb
