#include "cli.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "pkb/attention.hpp"
#include "pkb/bank.hpp"
#include "pkb/embeddings.hpp"
#include "pkb/error.hpp"
#include "pkb/gradcheck.hpp"
#include "pkb/hints.hpp"
#include "pkb/json_io.hpp"
#include "pkb/quantizer.hpp"
#include "pkb/random.hpp"

namespace pkb::cli {
namespace {

struct BuildBankFlags {
    std::string embeddings;
    std::string out;
    std::size_t n = 50;
    std::uint64_t seed = 0;
    double lr = 0.1;
    std::size_t steps = 2000;
    std::size_t hidden = 128;
    bool normalize = false;
    std::string hints = "on";
    std::size_t kmeans_iters = 200;
    double tol = 1e-6;
    std::string history;
};

struct InspectFlags {
    std::string bank;
    std::string embeddings;
    std::string report;
    std::string csv;
    bool normalize = false;
};

struct ComplementFlags {
    std::string bank;
    std::string features;
    std::string out;
    std::uint64_t seed = 0;
    std::size_t d_model = 64;
    std::size_t heads = 8;
    std::string params;
    std::string save_params;
    bool zero_output_proj = false;
};

struct GradcheckFlags {
    std::uint64_t seed = 0;
    std::size_t trials = 5;
    double threshold = 1e-6;
    bool inject_sign_error = false;
    ClassifierCheckSizes classifier;
    AttentionCheckSizes attention;
};

struct GenSyntheticFlags {
    std::string out;
    SyntheticConfig config;
};

struct GenFeaturesFlags {
    std::string out;
    std::string mode = "query";
    std::size_t m = 500;
    std::size_t h = 7;
    std::size_t w = 7;
    std::size_t c = 256;
    std::uint64_t seed = 0;
};

std::string fmt(double v) {
    std::ostringstream ss;
    ss << std::setprecision(6) << v;
    return ss.str();
}

int build_bank(const BuildBankFlags& f, std::ostream& out) {
    const auto dataset = parse_embedding_file(f.embeddings, {f.normalize});
    const auto parts = split_by_label(dataset);
    if (parts.pedestrians.empty()) fail(ErrorKind::precondition, "embedding file has no pedestrian records");
    if (parts.backgrounds.empty()) fail(ErrorKind::precondition, "embedding file has no background records");

    KMeansConfig km{f.n, f.kmeans_iters, f.tol, f.seed};
    const auto fit = kmeans(parts.pedestrians, km);

    TrainConfig tc{f.lr, f.steps, f.seed, f.hidden, f.hints == "on"};
    const auto trained = train_hints(parts.pedestrians, parts.backgrounds, fit.codebook, tc);

    std::map<std::string, std::string> meta{
        {"source", f.embeddings},
        {"records", std::to_string(dataset.size())},
        {"pedestrians", std::to_string(parts.pedestrians.size())},
        {"backgrounds", std::to_string(parts.backgrounds.size())},
        {"normalize", f.normalize ? "on" : "off"},
        {"seed", std::to_string(f.seed)},
        {"kmeans_max_iters", std::to_string(f.kmeans_iters)},
        {"kmeans_tol", json_io::format_number(f.tol)},
        {"kmeans_iterations", std::to_string(fit.iterations)},
        {"kmeans_objective", json_io::format_number(fit.objective.back())},
        {"lr", json_io::format_number(f.lr)},
        {"steps", std::to_string(f.steps)},
        {"hidden", std::to_string(f.hidden)},
        {"hints", f.hints},
    };
    const auto bank = make_bank(fit.codebook, trained.hints, std::move(meta));
    save_bank(bank, f.out);

    if (!f.history.empty()) {
        std::ostringstream ss;
        write_history(ss, trained.history);
        json_io::write_file(f.history, ss.str());
    }

    const auto report = assignment_report(dataset, fit.codebook);
    out << "codebook: N=" << fit.codebook.n() << " d=" << fit.codebook.dim() << " from "
        << parts.pedestrians.size() << " pedestrian records, " << fit.iterations << " k-means iterations, objective "
        << fmt(fit.objective.back()) << "\n";
    out << "final loss: " << fmt(trained.history.steps.back().loss) << " (mean of last "
        << std::min<std::size_t>(200, trained.history.size()) << " steps: " << fmt(trained.history.tail_mean_loss(200))
        << ")\n";
    out << "training accuracy: " << fmt(classification_accuracy(dataset, fit.codebook, trained.hints, trained.classifier))
        << "\n";
    out << "assignment entropy: " << fmt(assignment_entropy(report)) << " nats\n";
    out << "wrote " << f.out << "\n";
    return 0;
}

int inspect(const InspectFlags& f, std::ostream& out) {
    const auto bank = load_bank(f.bank);
    const auto dataset = parse_embedding_file(f.embeddings, {f.normalize});
    const auto codebook = bank.codebook();
    const auto report = assignment_report(dataset, codebook);
    const std::size_t total = std::accumulate(report.counts.begin(), report.counts.end(), std::size_t{0});

    std::ostringstream js;
    js << "{\"n\":" << bank.n() << ",\"dim\":" << bank.dim() << ",\"total\":" << total << ",\"entropy\":";
    json_io::write_number(js, assignment_entropy(report));
    js << ",\"counts\":[";
    for (std::size_t i = 0; i < report.counts.size(); ++i) js << (i ? "," : "") << report.counts[i];
    js << "],\n\"groups\":[";
    for (std::size_t i = 0; i < report.groups.size(); ++i) {
        js << (i ? ",\n" : "") << "{\"index\":" << i << ",\"count\":" << report.counts[i] << ",\"ids\":[";
        for (std::size_t k = 0; k < report.groups[i].size(); ++k) {
            if (k) js << ',';
            json_io::write_string(js, report.groups[i][k]);
        }
        js << "]}";
    }
    js << "]}\n";
    json_io::write_file(f.report, js.str());

    std::ostringstream csv;
    csv << "index";
    for (std::size_t j = 0; j < bank.dim(); ++j) csv << ",v" << j;
    csv << '\n';
    for (std::size_t i = 0; i < bank.n(); ++i) {
        csv << i;
        for (double v : bank.f_k.row(i)) csv << ',' << json_io::format_number(v);
        csv << '\n';
    }
    json_io::write_file(f.csv, csv.str());

    out << "records: " << total << "\n";
    for (std::size_t i = 0; i < report.counts.size(); ++i) out << "codeword " << i << ": " << report.counts[i] << "\n";
    out << "assignment entropy: " << fmt(assignment_entropy(report)) << " nats\n";
    out << "wrote " << f.report << " and " << f.csv << "\n";
    return 0;
}

int complement_cmd(const ComplementFlags& f, std::ostream& out) {
    const auto bank = load_bank(f.bank);
    const auto batch = load_feature_batch(f.features);
    AttentionParams params = f.params.empty() ? init_attention(batch.c, bank.dim(), f.d_model, f.heads, f.seed)
                                              : load_attention_params(f.params);
    if (f.zero_output_proj) {
        for (auto& x : params.w_o.flat()) x = 0.0;
    }
    if (!f.save_params.empty()) save_attention_params(params, f.save_params);
    const auto result = complement(batch, bank.f_k, params);
    save_feature_batch(result, f.out);
    out << "complemented " << result.m << " " << to_string(result.mode) << " block(s) of " << result.h << "x"
        << result.w << "x" << result.c << " against " << bank.n() << " bank features (" << params.heads
        << " heads, d_model " << params.d_model << ")\n";
    out << "wrote " << f.out << "\n";
    return 0;
}

int gradcheck(const GradcheckFlags& f, std::ostream& out) {
    if (f.trials == 0) fail(ErrorKind::precondition, "gradcheck needs at least one trial");
    GradcheckOptions options;
    options.inject_sign_error = f.inject_sign_error;

    std::vector<GroupError> worst;
    auto merge = [&](const GradcheckReport& r, const char* suite) {
        for (const auto& g : r.groups) {
            const std::string name = std::string(suite) + "." + g.group;
            auto it = std::find_if(worst.begin(), worst.end(), [&](const GroupError& w) { return w.group == name; });
            if (it == worst.end()) {
                worst.push_back({name, g.max_rel_error, g.coords});
            } else {
                it->max_rel_error = std::max(it->max_rel_error, g.max_rel_error);
            }
        }
    };
    for (std::size_t t = 0; t < f.trials; ++t) {
        const std::uint64_t seed = derive_seed(f.seed, t);
        merge(check_classifier_gradients(seed, f.classifier, options), "classifier");
        merge(check_attention_gradients(seed, f.attention, options), "attention");
    }

    bool ok = true;
    out << std::scientific << std::setprecision(3);
    for (const auto& g : worst) {
        const bool pass = g.max_rel_error < f.threshold;
        ok = ok && pass;
        out << (pass ? "ok   " : "FAIL ") << std::left << std::setw(22) << g.group << std::right << " max rel error "
            << g.max_rel_error << " over " << g.coords << " coords\n";
    }
    out << std::defaultfloat;
    out << (ok ? "gradcheck passed" : "gradcheck failed") << " (" << f.trials << " trials, threshold " << f.threshold
        << ")\n";
    if (!ok) fail(ErrorKind::threshold, "gradient error above threshold");
    return 0;
}

int gen_synthetic(const GenSyntheticFlags& f, std::ostream& out) {
    const auto dataset = generate_synthetic(f.config);
    save_embedding_file(dataset, f.out);
    out << "wrote " << dataset.size() << " records (d=" << dataset.dim() << ") to " << f.out << "\n";
    return 0;
}

int gen_features(const GenFeaturesFlags& f, std::ostream& out) {
    Rng rng(f.seed);
    const bool query = f.mode == "query";
    const std::size_t h = query ? 1 : f.h;
    const std::size_t w = query ? 1 : f.w;
    std::vector<double> data(f.m * h * w * f.c);
    for (auto& x : data) x = rng.normal();
    const auto batch = query ? FeatureBatch::queries(f.m, f.c, std::move(data))
                             : FeatureBatch::proposals(f.m, h, w, f.c, std::move(data));
    save_feature_batch(batch, f.out);
    out << "wrote " << f.m << " " << f.mode << " block(s) to " << f.out << "\n";
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Pedestrian knowledge bank: build, inspect and apply feature banks", "pkb"};
    app.require_subcommand(1);

    BuildBankFlags bb;
    auto* build = app.add_subcommand("build-bank", "Quantize pedestrian embeddings, train hints, save the bank");
    build->add_option("--embeddings", bb.embeddings, "Embedding JSON-lines file")->required();
    build->add_option("--out", bb.out, "Output bank file")->required();
    build->add_option("--n", bb.n, "Number of bank features")->capture_default_str()->check(CLI::PositiveNumber);
    build->add_option("--seed", bb.seed, "Seed for clustering and training")->capture_default_str();
    build->add_option("--lr", bb.lr, "SGD learning rate")->capture_default_str()->check(CLI::PositiveNumber);
    build->add_option("--steps", bb.steps, "Training steps")->capture_default_str()->check(CLI::PositiveNumber);
    build->add_option("--hidden", bb.hidden, "Classifier hidden width")->capture_default_str()->check(CLI::PositiveNumber);
    build->add_flag("--normalize", bb.normalize, "L2-normalize embeddings at ingestion");
    build->add_option("--hints", bb.hints, "Train the hints (on) or keep their initialization (off)")
        ->capture_default_str()
        ->check(CLI::IsMember({"on", "off"}));
    build->add_option("--kmeans-iters", bb.kmeans_iters, "Maximum k-means iterations")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    build->add_option("--tol", bb.tol, "k-means objective-change tolerance")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    build->add_option("--history", bb.history, "Write the training history as JSON lines");

    InspectFlags in;
    auto* insp = app.add_subcommand("inspect", "Report which records each bank feature represents");
    insp->add_option("--bank", in.bank, "Bank file")->required();
    insp->add_option("--embeddings", in.embeddings, "Embedding JSON-lines file")->required();
    insp->add_option("--report", in.report, "Grouping report (JSON)")->required();
    insp->add_option("--csv", in.csv, "f_k rows as CSV")->required();
    insp->add_flag("--normalize", in.normalize, "L2-normalize embeddings at ingestion");

    ComplementFlags cf;
    auto* comp = app.add_subcommand("complement", "Complement proposal/query features with the bank");
    comp->add_option("--bank", cf.bank, "Bank file")->required();
    comp->add_option("--features", cf.features, "Feature batch file")->required();
    comp->add_option("--out", cf.out, "Output feature batch file")->required();
    comp->add_option("--seed", cf.seed, "Seed for attention parameters")->capture_default_str();
    comp->add_option("--d-model", cf.d_model, "Per-head projection width")->capture_default_str()->check(CLI::PositiveNumber);
    comp->add_option("--heads", cf.heads, "Number of attention heads")->capture_default_str()->check(CLI::PositiveNumber);
    comp->add_option("--params", cf.params, "Load attention parameters instead of seeding them");
    comp->add_option("--save-params", cf.save_params, "Write the attention parameters used");
    comp->add_flag("--zero-output-proj", cf.zero_output_proj, "Zero the output projection (debug)");

    GradcheckFlags gc;
    auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the analytic gradients");
    grad->add_option("--seed", gc.seed)->capture_default_str();
    grad->add_option("--trials", gc.trials, "Number of random instances")->capture_default_str();
    grad->add_option("--threshold", gc.threshold, "Maximum relative error")->capture_default_str();
    grad->add_flag("--inject-sign-error", gc.inject_sign_error, "Corrupt one analytic gradient (self-test)");
    grad->add_option("--dim", gc.classifier.dim, "Classifier input dimension")->capture_default_str();
    grad->add_option("--hidden", gc.classifier.hidden, "Classifier hidden width")->capture_default_str();
    grad->add_option("--height", gc.attention.h)->capture_default_str();
    grad->add_option("--width", gc.attention.w)->capture_default_str();
    grad->add_option("--c", gc.attention.c)->capture_default_str();
    grad->add_option("--n", gc.attention.n, "Bank rows")->capture_default_str();
    grad->add_option("--d", gc.attention.d, "Bank dimension")->capture_default_str();
    grad->add_option("--d-model", gc.attention.d_model)->capture_default_str();
    grad->add_option("--heads", gc.attention.heads)->capture_default_str();

    GenSyntheticFlags gs;
    auto* synth = app.add_subcommand("gen-synthetic", "Write Gaussian pedestrian/background embeddings");
    synth->add_option("--out", gs.out, "Output JSON-lines file")->required();
    synth->add_option("--seed", gs.config.seed)->capture_default_str();
    synth->add_option("--pedestrians", gs.config.pedestrians)->capture_default_str();
    synth->add_option("--backgrounds", gs.config.backgrounds)->capture_default_str();
    synth->add_option("--dim", gs.config.dim)->capture_default_str();
    synth->add_option("--separation", gs.config.separation, "Distance between class means")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);

    GenFeaturesFlags gf;
    auto* feats = app.add_subcommand("gen-features", "Write a random feature batch");
    feats->add_option("--out", gf.out)->required();
    feats->add_option("--mode", gf.mode)->capture_default_str()->check(CLI::IsMember({"query", "proposal"}));
    feats->add_option("--m", gf.m)->capture_default_str();
    feats->add_option("--height", gf.h)->capture_default_str();
    feats->add_option("--width", gf.w)->capture_default_str();
    feats->add_option("--c", gf.c)->capture_default_str();
    feats->add_option("--seed", gf.seed)->capture_default_str();

    std::vector<std::string> argv_store{"pkb"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& a : argv_store) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : kUsageError;
    }

    try {
        if (*build) return build_bank(bb, out);
        if (*insp) return inspect(in, out);
        if (*comp) return complement_cmd(cf, out);
        if (*grad) return gradcheck(gc, out);
        if (*synth) return gen_synthetic(gs, out);
        if (*feats) return gen_features(gf, out);
    } catch (const Error& e) {
        err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kUsageError;
    }
    return kUsageError;
}

}  // namespace pkb::cli
