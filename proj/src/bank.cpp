#include "pkb/bank.hpp"

#include <ostream>
#include <sstream>

#include "pkb/error.hpp"
#include "pkb/json_io.hpp"

namespace pkb {

KnowledgeBank make_bank(const Codebook& codebook, const HintSet& hints, std::map<std::string, std::string> meta) {
    KnowledgeBank bank;
    bank.f_q = codebook.centroids();
    bank.f_k = compose(codebook, hints);
    bank.f_h = hints.hints;
    bank.meta = std::move(meta);
    return bank;
}

void validate(const KnowledgeBank& bank) {
    if (bank.version != kBankFormatVersion) {
        fail(ErrorKind::version, "unsupported bank version " + std::to_string(bank.version) + " (expected " +
                                     std::to_string(kBankFormatVersion) + ")");
    }
    const std::size_t n = bank.f_q.rows();
    const std::size_t d = bank.f_q.cols();
    if (n == 0 || d == 0) fail(ErrorKind::invariant, "bank is empty");
    for (const auto* m : {&bank.f_h, &bank.f_k}) {
        if (m->rows() != n || m->cols() != d) fail(ErrorKind::invariant, "bank matrices differ in shape");
    }
    if (!bank.f_q.all_finite() || !bank.f_h.all_finite() || !bank.f_k.all_finite()) {
        fail(ErrorKind::invariant, "bank holds a non-finite value");
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            if (bank.f_k(i, j) != bank.f_q(i, j) + bank.f_h(i, j)) {
                fail(ErrorKind::invariant, "f_k[" + std::to_string(i) + "][" + std::to_string(j) +
                                               "] is not f_q + f_h");
            }
        }
    }
}

void write_bank(std::ostream& out, const KnowledgeBank& bank) {
    validate(bank);
    out << "{\"version\":" << bank.version << ",\"n\":" << bank.n() << ",\"dim\":" << bank.dim();
    out << ",\n\"f_q\":";
    json_io::write_rows(out, bank.f_q);
    out << ",\n\"f_h\":";
    json_io::write_rows(out, bank.f_h);
    out << ",\n\"f_k\":";
    json_io::write_rows(out, bank.f_k);
    out << ",\n\"meta\":{";
    bool first = true;
    for (const auto& [k, v] : bank.meta) {
        if (!first) out << ',';
        first = false;
        json_io::write_string(out, k);
        out << ':';
        json_io::write_string(out, v);
    }
    out << "}}\n";
}

std::string serialize_bank(const KnowledgeBank& bank) {
    std::ostringstream ss;
    write_bank(ss, bank);
    return ss.str();
}

void save_bank(const KnowledgeBank& bank, const std::string& path) {
    json_io::write_file(path, serialize_bank(bank));
}

KnowledgeBank parse_bank(std::string_view text) {
    constexpr std::string_view ctx = "bank";
    const auto doc = json_io::parse_document(text, ctx);
    if (!doc.is_object()) fail(ErrorKind::parse, "bank: expected a JSON object");

    const auto& version = json_io::require(doc, "version", ctx);
    if (!version.is_number_integer()) fail(ErrorKind::parse, "bank: 'version' must be an integer");
    KnowledgeBank bank;
    bank.version = version.get<int>();
    if (bank.version != kBankFormatVersion) {
        fail(ErrorKind::version, "unsupported bank version " + std::to_string(bank.version) + " (expected " +
                                     std::to_string(kBankFormatVersion) + ")");
    }
    const std::size_t n = json_io::as_size(json_io::require(doc, "n", ctx), "bank 'n'");
    const std::size_t d = json_io::as_size(json_io::require(doc, "dim", ctx), "bank 'dim'");
    bank.f_q = json_io::as_matrix(json_io::require(doc, "f_q", ctx), n, d, "bank 'f_q'");
    bank.f_h = json_io::as_matrix(json_io::require(doc, "f_h", ctx), n, d, "bank 'f_h'");
    bank.f_k = json_io::as_matrix(json_io::require(doc, "f_k", ctx), n, d, "bank 'f_k'");

    const auto& meta = json_io::require(doc, "meta", ctx);
    if (!meta.is_object()) fail(ErrorKind::parse, "bank: 'meta' must be an object");
    for (const auto& [k, v] : meta.items()) {
        if (!v.is_string()) fail(ErrorKind::parse, "bank: meta value for '" + k + "' is not a string");
        bank.meta.emplace(k, v.get<std::string>());
    }
    validate(bank);
    return bank;
}

KnowledgeBank load_bank(const std::string& path) {
    const std::string text = json_io::read_file(path);
    try {
        return parse_bank(text);
    } catch (const Error& e) {
        fail(e.kind(), path + ": " + e.what());
    }
}

}  // namespace pkb
