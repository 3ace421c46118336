#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include <json.hpp>

#include "pkb/attention.hpp"
#include "pkb/error.hpp"
#include "test_util.hpp"

using namespace pkb;
using pkb::test::error_kind;
using pkb::test::random_matrix;

namespace {

std::vector<double> random_vector(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

// Direct evaluation with explicit loops, sharing no code with the library.
std::vector<double> naive_cross_attend(const FeatureBatch& batch, const Matrix& fk, const AttentionParams& p) {
    const std::size_t hw = batch.h * batch.w;
    const std::size_t c = batch.c;
    const std::size_t n = fk.rows();
    const std::size_t d = fk.cols();
    const std::size_t dm = p.d_model;
    std::vector<double> out(batch.data.size());
    for (std::size_t b = 0; b < batch.m; ++b) {
        const double* x = batch.data.data() + b * hw * c;
        std::vector<double> concat(hw * p.heads * dm, 0.0);
        for (std::size_t j = 0; j < p.heads; ++j) {
            std::vector<double> k(n * dm, 0.0), v(n * dm, 0.0), q(hw * dm, 0.0);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t e = 0; e < dm; ++e)
                    for (std::size_t i = 0; i < d; ++i) {
                        k[r * dm + e] += fk(r, i) * p.w_k[j](i, e);
                        v[r * dm + e] += fk(r, i) * p.w_v[j](i, e);
                    }
            for (std::size_t r = 0; r < hw; ++r)
                for (std::size_t e = 0; e < dm; ++e)
                    for (std::size_t i = 0; i < c; ++i) q[r * dm + e] += x[r * c + i] * p.w_q[j](i, e);
            for (std::size_t r = 0; r < hw; ++r) {
                std::vector<double> s(n, 0.0);
                for (std::size_t t = 0; t < n; ++t) {
                    for (std::size_t e = 0; e < dm; ++e) s[t] += q[r * dm + e] * k[t * dm + e];
                    s[t] /= std::sqrt(static_cast<double>(dm));
                }
                const double mx = *std::max_element(s.begin(), s.end());
                double z = 0.0;
                for (auto& e : s) z += (e = std::exp(e - mx));
                for (std::size_t e = 0; e < dm; ++e) {
                    double acc = 0.0;
                    for (std::size_t t = 0; t < n; ++t) acc += s[t] / z * v[t * dm + e];
                    concat[r * p.heads * dm + j * dm + e] = acc;
                }
            }
        }
        for (std::size_t r = 0; r < hw; ++r) {
            std::vector<double> zrow(c);
            for (std::size_t o = 0; o < c; ++o) {
                double acc = x[r * c + o];
                for (std::size_t e = 0; e < p.heads * dm; ++e) acc += concat[r * p.heads * dm + e] * p.w_o(e, o);
                zrow[o] = acc;
            }
            double mu = 0.0;
            for (double t : zrow) mu += t;
            mu /= static_cast<double>(c);
            double var = 0.0;
            for (double t : zrow) var += (t - mu) * (t - mu);
            var /= static_cast<double>(c);
            for (std::size_t o = 0; o < c; ++o) {
                out[b * hw * c + r * c + o] = p.gain[o] * (zrow[o] - mu) / std::sqrt(var + p.eps) + p.bias[o];
            }
        }
    }
    return out;
}

double max_group_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
        scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    return diff == 0.0 ? 0.0 : diff / scale;
}

std::vector<double> finite_diff(std::span<double> param, const std::function<double()>& loss) {
    const double h = 1e-5;
    std::vector<double> out(param.size());
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double keep = param[i];
        param[i] = keep + h;
        const double up = loss();
        param[i] = keep - h;
        const double down = loss();
        param[i] = keep;
        out[i] = (up - down) / (2 * h);
    }
    return out;
}

}  // namespace

TEST_CASE("init_attention") {
    CHECK(init_attention(16, 8, 4, 2, 3) == init_attention(16, 8, 4, 2, 3));
    CHECK_FALSE(init_attention(16, 8, 4, 2, 3) == init_attention(16, 8, 4, 2, 4));

    const auto def = init_attention(256, 512, 64, 8, 0);
    CHECK(def.w_o.rows() == 512);
    CHECK(def.w_o.cols() == 256);
    CHECK(def.w_q.size() == 8);
    CHECK(def.w_q[0].rows() == 256);
    CHECK(def.w_k[7].rows() == 512);
    CHECK(def.w_v[3].cols() == 64);

    const auto p = init_attention(32, 16, 8, 4, 6);
    CHECK_NOTHROW(p.validate());
    for (const auto* m : {&p.w_o, &p.w_q[0], &p.w_k[1], &p.w_v[2]}) CHECK(m->all_finite());
    for (double g : p.gain) CHECK(g == 1.0);
    for (double b : p.bias) CHECK(b == 0.0);
    CHECK(p.eps == 1e-5);
}

TEST_CASE("flatten_block") {
    const std::vector<double> one{1, 2, 3};
    CHECK(flatten_block(one, 1, 1, 3) == Matrix::from_rows({{1, 2, 3}}));
    // block[y][x]: [[a, b], [c, d]]
    const std::vector<double> square{10, 20, 30, 40};
    CHECK(flatten_block(square, 2, 2, 1) == Matrix::from_rows({{10}, {20}, {30}, {40}}));

    Rng rng(8);
    const auto block = random_vector(7 * 7 * 32, rng);
    const Matrix flat = flatten_block(block, 7, 7, 32);
    CHECK(flat.rows() == 49);
    // row y*w + x holds position (y, x)
    CHECK(flat(3 * 7 + 5, 11) == block[(3 * 7 + 5) * 32 + 11]);
    CHECK(unflatten_block(flat) == block);
    CHECK(error_kind([&] { flatten_block(block, 7, 7, 31); }) == ErrorKind::dimension);
}

TEST_CASE("layer_norm") {
    SUBCASE("two-point standardization") {
        const std::vector<double> g{1, 1}, b{0, 0};
        const auto y = layer_norm(std::vector<double>{2, 4}, g, b, 1e-300);
        CHECK(y[0] == -1.0);
        CHECK(y[1] == 1.0);
    }
    SUBCASE("constant row collapses to the bias") {
        const std::vector<double> g{2, 3, 4}, b{0.5, -1, 7};
        CHECK(layer_norm(std::vector<double>{0.1, 0.1, 0.1}, g, b, 1e-5) == b);
    }
    SUBCASE("seed-12 moments") {
        Rng rng(12);
        const auto x = random_vector(64, rng);
        const std::vector<double> g(64, 1.0);
        std::vector<double> b(64);
        for (auto& t : b) t = 0.0;
        const auto y = layer_norm(x, g, b, 1e-12);
        const double mean = std::accumulate(y.begin(), y.end(), 0.0) / 64.0;
        double var = 0.0;
        for (double t : y) var += (t - mean) * (t - mean);
        var /= 64.0;
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::abs(var - 1.0) < 1e-6);

        const auto yb = layer_norm(x, g, std::vector<double>(64, 2.5), 1e-12);
        const double mean_b = std::accumulate(yb.begin(), yb.end(), 0.0) / 64.0;
        CHECK(std::abs(mean_b - 2.5) < 1e-9);
    }
    SUBCASE("needs two channels") {
        CHECK(error_kind([] { layer_norm(std::vector<double>{1}, std::vector<double>{1}, std::vector<double>{0}, 1e-5); }) ==
              ErrorKind::precondition);
    }
}

TEST_CASE("cross_attend matches naive evaluation at the default sizes") {
    Rng rng(10);
    const std::size_t m = 3, h = 7, w = 7, c = 256, n = 50, d = 512, dm = 64, l = 8;
    const auto params = init_attention(c, d, dm, l, 10);
    const Matrix fk = random_matrix(n, d, rng, 0.05);
    const auto batch = FeatureBatch::proposals(m, h, w, c, random_vector(m * h * w * c, rng));
    const auto result = cross_attend(batch, fk, params);
    const auto expected = naive_cross_attend(batch, fk, params);
    REQUIRE(result.output.data.size() == expected.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < expected.size(); ++i) worst = std::max(worst, std::abs(result.output.data[i] - expected[i]));
    CHECK(worst < 1e-10);
    CHECK(result.output.m == m);
    CHECK(result.output.h == h);
    CHECK(result.output.c == c);
    REQUIRE(result.trace.blocks.size() == m);
    CHECK(result.trace.blocks[0].association.size() == l);
    CHECK(result.trace.blocks[0].association[0].rows() == h * w);
    CHECK(result.trace.blocks[0].association[0].cols() == n);
}

TEST_CASE("association rows are distributions") {
    Rng rng(31);
    const auto params = init_attention(12, 6, 5, 3, 31);
    const Matrix fk = random_matrix(9, 6, rng, 3.0);
    const auto batch = FeatureBatch::proposals(4, 3, 2, 12, random_vector(4 * 3 * 2 * 12, rng));
    const auto r = cross_attend(batch, fk, params);
    for (const auto& blk : r.trace.blocks) {
        for (const auto& a : blk.association) {
            for (std::size_t row = 0; row < a.rows(); ++row) {
                double s = 0.0;
                for (double v : a.row(row)) {
                    CHECK(v >= 0.0);
                    CHECK(v <= 1.0);
                    s += v;
                }
                CHECK(std::abs(s - 1.0) < 1e-6);
            }
        }
        // trace output is layer_norm(pre_norm)
        for (std::size_t row = 0; row < blk.pre_norm.rows(); ++row) {
            const auto y = layer_norm(blk.pre_norm.row(row), params.gain, params.bias, params.eps);
            CHECK(std::equal(y.begin(), y.end(), blk.output.row(row).begin()));
        }
    }
}

TEST_CASE("zero output projection leaves layer_norm(input)") {
    Rng rng(40);
    auto params = init_attention(8, 5, 4, 2, 40);
    for (auto& x : params.w_o.flat()) x = 0.0;
    for (auto& g : params.gain) g = 1.0 + 0.3 * rng.normal();
    const Matrix fk = random_matrix(6, 5, rng);
    for (const auto& batch : {FeatureBatch::proposals(3, 2, 3, 8, random_vector(3 * 6 * 8, rng)),
                              FeatureBatch::queries(5, 8, random_vector(5 * 8, rng))}) {
        const auto out = complement(batch, fk, params);
        for (std::size_t i = 0; i < batch.m * batch.positions(); ++i) {
            const std::span<const double> row(batch.data.data() + i * 8, 8);
            const auto y = layer_norm(row, params.gain, params.bias, params.eps);
            CHECK(std::equal(y.begin(), y.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * 8)));
        }
    }
}

TEST_CASE("bank row permutation leaves the output unchanged") {
    Rng rng(50);
    const auto params = init_attention(16, 10, 4, 3, 50);
    const Matrix fk = random_matrix(12, 10, rng);
    const auto batch = FeatureBatch::proposals(2, 3, 3, 16, random_vector(2 * 9 * 16, rng));
    const auto base = complement(batch, fk, params);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<std::size_t> perm(12);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
        Matrix shuffled(12, 10);
        for (std::size_t r = 0; r < 12; ++r) {
            std::copy(fk.row(perm[r]).begin(), fk.row(perm[r]).end(), shuffled.row(r).begin());
        }
        const auto out = complement(batch, shuffled, params);
        for (std::size_t i = 0; i < out.data.size(); ++i) CHECK(std::abs(out.data[i] - base.data[i]) < 1e-10);
    }
}

TEST_CASE("proposal mode with h = w = 1 equals query mode") {
    Rng rng(60);
    const auto params = init_attention(20, 7, 5, 2, 60);
    const Matrix fk = random_matrix(5, 7, rng);
    const auto data = random_vector(6 * 20, rng);
    const auto q = complement(FeatureBatch::queries(6, 20, data), fk, params);
    const auto p = complement(FeatureBatch::proposals(6, 1, 1, 20, data), fk, params);
    CHECK(q.data == p.data);
    CHECK(q.mode == FeatureMode::query);
    CHECK(p.mode == FeatureMode::proposal);
}

TEST_CASE("cross_attend is deterministic and reads f_k from a bank") {
    Rng rng(70);
    const Codebook cb(random_matrix(4, 6, rng));
    const auto bank = make_bank(cb, init_hints(4, 6, 70));
    const auto params = init_attention(10, 6, 3, 2, 70);
    const auto batch = FeatureBatch::queries(8, 10, random_vector(80, rng));
    const auto a = cross_attend(batch, bank, params);
    const auto b = cross_attend(batch, bank, params);
    CHECK(a.output == b.output);
    CHECK(a.output == complement(batch, bank.f_k, params));
    CHECK_FALSE(a.output == complement(batch, bank.f_q, params));
}

TEST_CASE("cross_attend rejects inconsistent inputs") {
    Rng rng(80);
    const auto params = init_attention(8, 6, 4, 2, 80);
    const auto batch = FeatureBatch::queries(2, 8, random_vector(16, rng));
    CHECK(error_kind([&] { complement(batch, random_matrix(3, 5, rng), params); }) == ErrorKind::dimension);
    const auto wide = FeatureBatch::queries(2, 9, random_vector(18, rng));
    CHECK(error_kind([&] { complement(wide, random_matrix(3, 6, rng), params); }) == ErrorKind::dimension);
    CHECK(error_kind([&] { complement(batch, Matrix(0, 6), params); }) == ErrorKind::dimension);

    auto broken = params;
    broken.w_q.pop_back();
    CHECK(error_kind([&] { complement(batch, random_matrix(3, 6, rng), broken); }) == ErrorKind::dimension);

    // Finite inputs whose attention scores overflow.
    auto huge = batch;
    for (auto& x : huge.data) x *= 1e200;
    const Matrix huge_bank = random_matrix(3, 6, rng, 1e200);
    const auto msg = pkb::test::error_message([&] { complement(huge, huge_bank, params); });
    CHECK(msg.find("block 0") != std::string::npos);
    CHECK(msg.find("head") != std::string::npos);
    CHECK(error_kind([&] { complement(huge, huge_bank, params); }) == ErrorKind::numeric);
}

TEST_CASE("feature batch validation") {
    CHECK(error_kind([] { FeatureBatch::queries(2, 3, std::vector<double>(5)); }) == ErrorKind::dimension);
    CHECK(error_kind([] { FeatureBatch::proposals(1, 2, 2, 2, std::vector<double>(8, NAN)); }) == ErrorKind::numeric);
    FeatureBatch bad{FeatureMode::query, 1, 2, 1, 2, std::vector<double>(4)};
    CHECK(error_kind([&] { bad.validate(); }) == ErrorKind::dimension);
}

TEST_CASE("attention gradients") {
    SUBCASE("zero upstream gives zero gradients") {
        Rng rng(90);
        const auto params = init_attention(6, 4, 3, 2, 90);
        const auto batch = FeatureBatch::proposals(2, 2, 2, 6, random_vector(48, rng));
        const auto g = attention_gradients(batch, random_matrix(5, 4, rng), params, std::vector<double>(48, 0.0));
        for (const auto& m : g.w_q) for (double x : m.flat()) CHECK(x == 0.0);
        for (const auto& m : g.w_k) for (double x : m.flat()) CHECK(x == 0.0);
        for (const auto& m : g.w_v) for (double x : m.flat()) CHECK(x == 0.0);
        for (double x : g.w_o.flat()) CHECK(x == 0.0);
        for (double x : g.gain) CHECK(x == 0.0);
        for (double x : g.bias) CHECK(x == 0.0);
    }
    SUBCASE("single upstream coordinate") {
        // Cotangent on output (block 1, position 2, channel 3) only.
        Rng rng(91);
        const auto params = init_attention(6, 4, 3, 2, 91);
        const auto batch = FeatureBatch::proposals(2, 2, 2, 6, random_vector(48, rng));
        const Matrix fk = random_matrix(5, 4, rng);
        std::vector<double> up(48, 0.0);
        up[1 * 24 + 2 * 6 + 3] = 1.0;
        const auto g = attention_gradients(batch, fk, params, up);
        for (std::size_t k = 0; k < 6; ++k) {
            CHECK((g.bias[k] != 0.0) == (k == 3));
            CHECK((g.gain[k] != 0.0) == (k == 3));
        }
        // Only one position receives a cotangent, so the W_O gradient is the
        // outer product of that position's concatenated head outputs with the
        // layer-norm input cotangent: every 2x2 minor vanishes.
        const auto& gw = g.w_o;
        double top = 0.0;
        for (double x : gw.flat()) top = std::max(top, std::abs(x));
        REQUIRE(top > 0.0);
        for (std::size_t a = 0; a + 1 < gw.rows(); ++a)
            for (std::size_t b = 0; b + 1 < gw.cols(); ++b)
                CHECK(std::abs(gw(a, b) * gw(a + 1, b + 1) - gw(a, b + 1) * gw(a + 1, b)) < 1e-12 * top * top);
    }
    SUBCASE("upstream length is checked") {
        Rng rng(92);
        const auto params = init_attention(6, 4, 3, 2, 92);
        const auto batch = FeatureBatch::queries(2, 6, random_vector(12, rng));
        CHECK(error_kind([&] { attention_gradients(batch, random_matrix(5, 4, rng), params, std::vector<double>(11)); }) ==
              ErrorKind::dimension);
    }
}

TEST_CASE("attention gradients match central finite differences (seed 14)") {
    Rng rng(14);
    auto params = init_attention(8, 8, 4, 2, 14);
    for (auto& g : params.gain) g = 1.0 + 0.2 * rng.normal();
    for (auto& b : params.bias) b = 0.2 * rng.normal();
    const Matrix fk = random_matrix(4, 8, rng);
    const auto batch = FeatureBatch::proposals(2, 2, 2, 8, random_vector(2 * 2 * 2 * 8, rng));
    const auto up = random_vector(batch.data.size(), rng);
    const auto g = attention_gradients(batch, fk, params, up);

    // Numeric side uses the naive evaluator only.
    auto loss = [&] {
        const auto out = naive_cross_attend(batch, fk, params);
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * up[i];
        return s;
    };
    for (std::size_t j = 0; j < params.heads; ++j) {
        CHECK(max_group_error(g.w_q[j].values(), finite_diff(params.w_q[j].flat(), loss)) < 1e-6);
        CHECK(max_group_error(g.w_k[j].values(), finite_diff(params.w_k[j].flat(), loss)) < 1e-6);
        CHECK(max_group_error(g.w_v[j].values(), finite_diff(params.w_v[j].flat(), loss)) < 1e-6);
    }
    CHECK(max_group_error(g.w_o.values(), finite_diff(params.w_o.flat(), loss)) < 1e-6);
    CHECK(max_group_error(g.gain, finite_diff(params.gain, loss)) < 1e-6);
    CHECK(max_group_error(g.bias, finite_diff(params.bias, loss)) < 1e-6);
}

TEST_CASE("query-mode gradients match finite differences") {
    Rng rng(15);
    const auto params0 = init_attention(5, 3, 2, 3, 15);
    auto params = params0;
    const Matrix fk = random_matrix(6, 3, rng);
    const auto batch = FeatureBatch::queries(4, 5, random_vector(20, rng));
    const auto up = random_vector(20, rng);
    const auto g = attention_gradients(batch, fk, params, up);
    auto loss = [&] {
        const auto out = naive_cross_attend(batch, fk, params);
        return std::inner_product(out.begin(), out.end(), up.begin(), 0.0);
    };
    CHECK(max_group_error(g.w_o.values(), finite_diff(params.w_o.flat(), loss)) < 1e-6);
    CHECK(max_group_error(g.w_q[2].values(), finite_diff(params.w_q[2].flat(), loss)) < 1e-6);
    CHECK(max_group_error(g.w_k[1].values(), finite_diff(params.w_k[1].flat(), loss)) < 1e-6);
    CHECK(params == params0);
}

TEST_CASE("feature batch files round-trip exactly") {
    Rng rng(16);
    const auto batch = FeatureBatch::proposals(3, 2, 4, 5, random_vector(3 * 2 * 4 * 5, rng));
    pkb::test::TempFile a("features_a.json");
    pkb::test::TempFile b("features_b.json");
    save_feature_batch(batch, a.str());
    save_feature_batch(batch, b.str());
    CHECK(load_feature_batch(a.str()) == batch);
    CHECK(pkb::test::read_text(a.str()) == pkb::test::read_text(b.str()));

    const auto q = FeatureBatch::queries(2, 3, {1, -0.0, 3.5, 1e-300, 2, 7});
    const auto back = parse_feature_batch(serialize_feature_batch(q));
    CHECK(back == q);
    CHECK(std::signbit(back.data[1]));
    // h and w may be omitted in query mode.
    CHECK(parse_feature_batch(R"({"mode":"query","m":1,"c":2,"data":[1,2]})") == FeatureBatch::queries(1, 2, {1, 2}));
}

TEST_CASE("feature batch parse errors") {
    CHECK(error_kind([] { parse_feature_batch(R"({"mode":"grid","m":1,"c":2,"data":[1,2]})"); }) == ErrorKind::parse);
    CHECK(error_kind([] { parse_feature_batch(R"({"mode":"proposal","m":1,"c":2,"data":[1,2]})"); }) == ErrorKind::parse);
    CHECK(error_kind([] { parse_feature_batch(R"({"mode":"query","m":2,"c":2,"data":[1,2]})"); }) == ErrorKind::dimension);
    CHECK(error_kind([] { parse_feature_batch(R"({"mode":"query","m":1,"h":2,"w":1,"c":1,"data":[1,2]})"); }) ==
          ErrorKind::dimension);
    CHECK(error_kind([] { parse_feature_batch("[1,2,3]"); }) == ErrorKind::parse);
}

TEST_CASE("attention parameter files round-trip exactly") {
    auto params = init_attention(6, 4, 3, 2, 17);
    params.gain[2] = 0.75;
    params.eps = 1e-6;
    pkb::test::TempFile file("params.json");
    save_attention_params(params, file.str());
    CHECK(load_attention_params(file.str()) == params);

    auto doc = nlohmann::json::parse(pkb::test::read_text(file.str()));
    doc["w_k"].erase(0);
    CHECK(error_kind([&] { parse_attention_params(doc.dump()); }) == ErrorKind::dimension);
}
