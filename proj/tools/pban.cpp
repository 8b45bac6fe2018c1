#include <CLI11.hpp>
#include <Eigen/Core>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "json.hpp"
#include "pban/config_json.hpp"
#include "pban/dataset.hpp"
#include "pban/features.hpp"
#include "pban/gradcheck.hpp"
#include "pban/training.hpp"

namespace {

using pban::Index;
namespace fs = std::filesystem;

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// Raised for bad flag values that CLI11 cannot check on its own.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

pban::PbanConfig read_config(const std::optional<std::string>& path) {
    pban::PbanConfig config;
    if (!path) return config;
    std::ifstream in(*path);
    if (!in) throw UsageError("cannot open config '" + *path + "'");
    try {
        config = nlohmann::json::parse(in).get<pban::PbanConfig>();
        config.validate();
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(*path + ": " + e.what());
    } catch (const pban::ParameterError& e) {
        throw UsageError(*path + ": " + e.what());
    }
    return config;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw pban::IoError("cannot write '" + path.string() + "'");
    out << j.dump(2) << "\n";
    if (!out) throw pban::IoError("write failed for '" + path.string() + "'");
}

// Fails before any expensive work when the output cannot be created.
void require_parent_dir(const fs::path& path) {
    const fs::path parent = path.parent_path();
    if (!parent.empty() && !fs::is_directory(parent)) {
        throw pban::IoError("output directory '" + parent.string() + "' does not exist");
    }
}

fs::path report_path(const fs::path& checkpoint) {
    fs::path p = checkpoint;
    return p.replace_extension(".report.json");
}

int configure_threads() {
    const char* env = std::getenv("PBAN_THREADS");
    int threads = 1;
    if (env && *env) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (*end != '\0' || v < 1 || v > 1024) throw UsageError(std::string("PBAN_THREADS must be a positive integer, got '") + env + "'");
        threads = int(v);
    }
    Eigen::setNbThreads(threads);
    return threads;
}

struct TrainArgs {
    std::string manifest, out;
    std::optional<std::string> config;
    Index epochs = 100, folds = 5, batch = 32;
    std::uint64_t seed = 0;
};

int cmd_train(const TrainArgs& a) {
    const pban::PbanConfig config = read_config(a.config);
    pban::SgdConfig sgd;
    sgd.epochs = a.epochs;
    sgd.batch_size = a.batch;
    sgd.seed = a.seed;
    require_parent_dir(a.out);
    const pban::Manifest manifest = pban::load_manifest(a.manifest);
    const pban::TrainReport report = pban::train(manifest, config, sgd, a.folds, a.out, &std::cerr);
    write_json(report_path(a.out), report);
    std::cerr << "wrote " << a.out << " and " << report_path(a.out).string() << "\n";
    return kOk;
}

int cmd_score(const std::string& model, const std::string& sr, const std::string& hr) {
    const pban::Checkpoint ck = pban::load_checkpoint(model);
    const pban::ImageRGB sr_img = pban::read_image(sr);
    const pban::ImageRGB hr_img = pban::read_image(hr);
    const double score = pban::predict_image(ck.weights, ck.config, sr_img, hr_img);
    std::printf("%.9g\n", score);
    return kOk;
}

int cmd_eval(const std::string& model, const std::string& manifest_path, const std::string& out) {
    require_parent_dir(out);
    const pban::Checkpoint ck = pban::load_checkpoint(model);
    const pban::Manifest manifest = pban::load_manifest(manifest_path);
    const pban::MetricReport report = pban::evaluate(ck.weights, ck.config, manifest);
    write_json(out, report);
    std::cerr << "srcc " << report.srcc << " krcc " << report.krcc << " plcc " << report.plcc << " rmse "
              << report.rmse << "\n";
    return kOk;
}

int cmd_gradcheck(const std::optional<std::string>& op, std::uint64_t seed, int seeds) {
    const auto reports = pban::run_gradcheck(op, seed, seeds);
    bool ok = true;
    for (const auto& r : reports) {
        std::cout << (r.passed() ? "PASS " : "FAIL ") << r.op << " seed " << r.seed << " max_rel_error "
                  << r.max_rel_error << " coordinates " << r.coordinates;
        if (!r.passed()) std::cout << " worst " << *r.failing_coordinate;
        std::cout << "\n";
        ok = ok && r.passed();
    }
    return ok ? kOk : kNumeric;
}

int cmd_inspect(const std::string& model) {
    const pban::Checkpoint ck = pban::load_checkpoint(model);
    const pban::ParamCount pc = pban::param_count(ck.config);
    Index stored = 0;
    for (const auto& [name, t] : ck.weights) stored += t.size();
    nlohmann::json j;
    j["config"] = ck.config;
    j["per_module"] = pc.per_module;
    j["trainable"] = pc.trainable;
    j["buffers"] = pc.buffers;
    j["total"] = pc.total();
    j["gmdc_kernel_weights"] = pc.gmdc_kernel_weights;
    j["checkpoint_scalars"] = stored;
    std::cout << j.dump(2) << "\n";
    return kOk;
}

int cmd_dump_features(const std::string& model, const std::string& sr, const std::string& hr,
                      const std::string& out) {
    const pban::Checkpoint ck = pban::load_checkpoint(model);
    const auto files = pban::dump_features(pban::read_image(hr), pban::read_image(sr), ck.weights, ck.config, out);
    for (const auto& f : files) std::cout << f.string() << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Full-reference quality scoring of super-resolved images"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "k-fold training, then a full-set fit saved as a checkpoint");
    train->add_option("--manifest", ta.manifest, "CSV with sr_path,hr_path,mos")->required();
    train->add_option("--out", ta.out, "checkpoint path; the report is written beside it")->required();
    train->add_option("--config", ta.config, "architecture JSON overriding the defaults");
    train->add_option("--epochs", ta.epochs, "epochs per fold")->check(CLI::PositiveNumber);
    train->add_option("--folds", ta.folds, "number of folds")->check(CLI::Range(Index(2), Index(1) << 30));
    train->add_option("--seed", ta.seed);
    train->add_option("--batch", ta.batch, "mini-batch size")->check(CLI::PositiveNumber);

    std::string model, sr, hr, manifest, out;
    auto* score = app.add_subcommand("score", "print the predicted quality of one SR/HR pair");
    score->add_option("--model", model)->required();
    score->add_option("--sr", sr)->required();
    score->add_option("--hr", hr)->required();

    auto* eval = app.add_subcommand("eval", "write a metric report for a manifest");
    eval->add_option("--model", model)->required();
    eval->add_option("--manifest", manifest)->required();
    eval->add_option("--out", out, "JSON report path")->required();

    std::optional<std::string> op;
    std::uint64_t seed = 0;
    int seeds = 1;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    gradcheck->add_option("--op", op, "one operator, or pban_loss for the whole network");
    gradcheck->add_option("--seed", seed, "first seed");
    gradcheck->add_option("--seeds", seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);

    auto* inspect = app.add_subcommand("inspect", "print config and parameter counts of a checkpoint");
    inspect->add_option("--model", model)->required();

    auto* dump = app.add_subcommand("dump-features", "write intermediate feature maps as PNG");
    dump->add_option("--model", model)->required();
    dump->add_option("--sr", sr)->required();
    dump->add_option("--hr", hr)->required();
    dump->add_option("--out", out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        configure_threads();
        if (*train) return cmd_train(ta);
        if (*score) return cmd_score(model, sr, hr);
        if (*eval) return cmd_eval(model, manifest, out);
        if (*gradcheck) return cmd_gradcheck(op, seed, seeds);
        if (*inspect) return cmd_inspect(model);
        if (*dump) return cmd_dump_features(model, sr, hr, out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const pban::ParameterError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const pban::LookupError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const pban::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kNumeric;
    } catch (const pban::UndefinedMetricError& e) {
        std::cerr << "undefined metric: " << e.what() << "\n";
        return kNumeric;
    } catch (const pban::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    }
    return kUsage;
}
