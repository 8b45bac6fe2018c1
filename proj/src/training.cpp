#include "pban/training.hpp"

#include <chrono>
#include <cmath>
#include <ostream>

#include "pban/loss.hpp"

namespace pban {

namespace {

constexpr Index kInferenceBatch = 16;

std::string record_name(const Manifest& m, Index i) {
    return "record " + std::to_string(i + 1) + " (" + m.records[std::size_t(i)].sr_path.string() + ")";
}

void check_pair_images(const ImageRGB& sr, const ImageRGB& hr, const std::string& where) {
    if (sr.width != hr.width || sr.height != hr.height) {
        throw DataError(where + ": SR is " + std::to_string(sr.width) + "x" + std::to_string(sr.height) +
                        " but HR is " + std::to_string(hr.width) + "x" + std::to_string(hr.height));
    }
}

}  // namespace

void SgdConfig::validate() const {
    if (!(lr > 0)) throw ParameterError("lr must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw ParameterError("momentum must be in [0,1)");
    if (!(weight_decay >= 0)) throw ParameterError("weight_decay must be >= 0");
    if (epochs < 1) throw ParameterError("epochs must be >= 1");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
}

std::vector<Index> FoldSplit::members(Index fold) const {
    std::vector<Index> out;
    for (Index i = 0; i < Index(assignments.size()); ++i)
        if (assignments[std::size_t(i)] == fold) out.push_back(i);
    return out;
}

std::vector<Index> FoldSplit::complement(Index fold) const {
    std::vector<Index> out;
    for (Index i = 0; i < Index(assignments.size()); ++i)
        if (assignments[std::size_t(i)] != fold) out.push_back(i);
    return out;
}

FoldSplit kfold_split(Index n_records, Index k, std::uint64_t seed) {
    if (k < 2) throw ParameterError("k-fold split needs k >= 2, got " + std::to_string(k));
    if (n_records < k) {
        throw ParameterError("k-fold split needs at least k=" + std::to_string(k) + " records, got " +
                             std::to_string(n_records));
    }
    std::vector<Index> order(static_cast<std::size_t>(n_records));
    for (Index i = 0; i < n_records; ++i) order[std::size_t(i)] = i;
    Rng rng(seed);
    rng.shuffle(order);
    FoldSplit split{k, std::vector<Index>(std::size_t(n_records))};
    for (Index pos = 0; pos < n_records; ++pos) split.assignments[std::size_t(order[std::size_t(pos)])] = pos % k;
    return split;
}

std::vector<Index> PatchDataset::patches_of(const std::vector<Index>& records) const {
    std::vector<Index> out;
    for (Index r : records)
        for (Index i = 0; i < size(); ++i)
            if (record[std::size_t(i)] == r) out.push_back(i);
    return out;
}

PatchDataset build_patch_dataset(const Manifest& manifest, Index patch_size) {
    if (manifest.records.empty()) throw DataError("manifest has no records");
    PatchDataset data;
    for (Index i = 0; i < Index(manifest.records.size()); ++i) {
        const auto& rec = manifest.records[std::size_t(i)];
        const std::string where = record_name(manifest, i);
        ImageRGB sr, hr;
        try {
            sr = read_image(rec.sr_path);
            hr = read_image(rec.hr_path);
        } catch (const Error& e) {
            throw DataError(where + ": " + e.what());
        }
        check_pair_images(sr, hr, where);
        auto sp = extract_patches(sr, patch_size);
        auto hp = extract_patches(hr, patch_size);
        if (sp.empty()) throw DataError(where + ": image smaller than one " + std::to_string(patch_size) + "px patch");
        for (std::size_t p = 0; p < sp.size(); ++p) {
            data.sr.push_back(std::move(sp[p]));
            data.hr.push_back(std::move(hp[p]));
            data.mos.push_back(float(rec.mos));
            data.record.push_back(i);
        }
    }
    return data;
}

TensorF stack_patches(const std::vector<TensorF>& patches, const std::vector<Index>& ids) {
    if (ids.empty()) throw DataError("empty patch batch");
    const Shape& ps = patches[std::size_t(ids[0])].shape();
    Shape shape{Index(ids.size())};
    shape.insert(shape.end(), ps.begin(), ps.end());
    TensorF out(shape);
    const Index n = shape_numel(ps);
    for (std::size_t b = 0; b < ids.size(); ++b) out.vec().segment(Index(b) * n, n) = patches[std::size_t(ids[b])].vec();
    return out;
}

std::vector<double> run_epochs(NamedWeights<float>& weights, NamedWeights<float>& velocity,
                               const PatchDataset& data, const std::vector<Index>& ids,
                               const PbanConfig& config, const SgdConfig& sgd, Index epochs, Rng& rng,
                               std::ostream* log) {
    sgd.validate();
    if (ids.empty()) throw DataError("no training patches");
    std::vector<double> losses;
    std::vector<Index> order = ids;
    for (Index e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += std::size_t(sgd.batch_size)) {
            const std::size_t end = std::min(order.size(), start + std::size_t(sgd.batch_size));
            const std::vector<Index> batch(order.begin() + std::ptrdiff_t(start), order.begin() + std::ptrdiff_t(end));
            TensorF target({Index(batch.size())});
            for (std::size_t b = 0; b < batch.size(); ++b) target[Index(b)] = data.mos[std::size_t(batch[b])];

            ParamSet<float> params(weights, true);
            ForwardContext<float> ctx{params, config, Mode::train, &rng};
            const VarF pred = model_forward(ctx, VarF::constant(stack_patches(data.hr, batch)),
                                            VarF::constant(stack_patches(data.sr, batch)));
            const VarF loss = mse_loss(pred, target);
            const auto grads = params.gradients(backward(loss));
            sgd_step(weights, grads, velocity, sgd);
            total += double(loss.value().item()) * double(batch.size());
        }
        losses.push_back(total / double(order.size()));
        if (!std::isfinite(losses.back())) throw NumericError("training loss diverged at epoch " + std::to_string(e + 1));
        if (log) *log << "epoch " << (e + 1) << "/" << epochs << " loss " << losses.back() << "\n";
    }
    return losses;
}

std::vector<double> predict_patches(const NamedWeights<float>& weights, const PbanConfig& config,
                                    const PatchDataset& data, const std::vector<Index>& ids) {
    std::vector<double> out;
    out.reserve(ids.size());
    for (std::size_t start = 0; start < ids.size(); start += kInferenceBatch) {
        const std::size_t end = std::min(ids.size(), start + std::size_t(kInferenceBatch));
        const std::vector<Index> batch(ids.begin() + std::ptrdiff_t(start), ids.begin() + std::ptrdiff_t(end));
        ParamSet<float> params(weights);
        ForwardContext<float> ctx{params, config, Mode::eval};
        const VarF pred = model_forward(ctx, VarF::constant(stack_patches(data.hr, batch)),
                                        VarF::constant(stack_patches(data.sr, batch)));
        for (Index b = 0; b < pred.value().size(); ++b) out.push_back(double(pred.value()[b]));
    }
    return out;
}

double dataset_mse(const NamedWeights<float>& weights, const PbanConfig& config, const PatchDataset& data,
                   const std::vector<Index>& ids) {
    const auto pred = predict_patches(weights, config, data, ids);
    double s = 0.0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const double d = pred[i] - double(data.mos[std::size_t(ids[i])]);
        s += d * d;
    }
    return s / double(ids.size());
}

double predict_image(const NamedWeights<float>& weights, const PbanConfig& config, const ImageRGB& sr,
                     const ImageRGB& hr) {
    check_pair_images(sr, hr, "image pair");
    PatchDataset data;
    data.sr = extract_patches(sr, config.patch_size);
    data.hr = extract_patches(hr, config.patch_size);
    if (data.sr.empty()) {
        throw DataError("image " + std::to_string(sr.width) + "x" + std::to_string(sr.height) +
                        " yields no " + std::to_string(config.patch_size) + "px patch");
    }
    std::vector<Index> ids(data.sr.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = Index(i);
    const auto pred = predict_patches(weights, config, data, ids);
    double s = 0.0;
    for (double p : pred) s += p;
    return s / double(pred.size());
}

void to_json(nlohmann::json& j, const TrainReport& r) {
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& f : r.folds) {
        nlohmann::json fj{{"fold", f.fold}, {"epoch_loss", f.epoch_loss}, {"validation_records", f.validation_records}};
        if (f.metrics) {
            fj["metrics"] = *f.metrics;
        } else {
            fj["metrics"] = nullptr;
            fj["metrics_error"] = f.metrics_error;
        }
        folds.push_back(std::move(fj));
    }
    j = nlohmann::json{{"folds", std::move(folds)},
                       {"final_epoch_loss", r.final_epoch_loss},
                       {"final_policy", r.final_policy},
                       {"wall_seconds", r.wall_seconds},
                       {"checkpoint", r.checkpoint.string()},
                       {"records", r.records},
                       {"patches", r.patches},
                       {"k", r.k},
                       {"sgd",
                        {{"lr", r.sgd.lr},
                         {"momentum", r.sgd.momentum},
                         {"weight_decay", r.sgd.weight_decay},
                         {"epochs", r.sgd.epochs},
                         {"batch_size", r.sgd.batch_size},
                         {"seed", r.sgd.seed}}}};
}

TrainReport train(const Manifest& manifest, const PbanConfig& config, const SgdConfig& sgd, Index folds,
                  const std::filesystem::path& checkpoint, std::ostream* log) {
    const auto t0 = std::chrono::steady_clock::now();
    config.validate();
    sgd.validate();
    const PatchDataset data = build_patch_dataset(manifest, config.patch_size);
    const Index n = Index(manifest.records.size());
    const FoldSplit split = kfold_split(n, folds, sgd.seed);

    TrainReport report;
    report.sgd = sgd;
    report.k = folds;
    report.records = n;
    report.patches = data.size();
    report.checkpoint = checkpoint;

    Rng master(sgd.seed);
    for (Index f = 0; f < folds; ++f) {
        FoldResult result;
        result.fold = f;
        result.validation_records = split.members(f);
        NamedWeights<float> weights = init_weights<float>(config, sgd.seed);
        NamedWeights<float> velocity = zero_velocity(weights);
        Rng rng = master.fork();
        if (log) *log << "fold " << (f + 1) << "/" << folds << "\n";
        result.epoch_loss = run_epochs(weights, velocity, data, data.patches_of(split.complement(f)), config, sgd,
                                       sgd.epochs, rng, log);
        std::vector<double> pred, mos;
        for (Index r : result.validation_records) {
            const auto ids = data.patches_of({r});
            const auto p = predict_patches(weights, config, data, ids);
            double s = 0.0;
            for (double v : p) s += v;
            pred.push_back(s / double(p.size()));
            mos.push_back(manifest.records[std::size_t(r)].mos);
        }
        try {
            result.metrics = compute_metrics(pred, mos);
        } catch (const Error& e) {
            result.metrics_error = e.what();
        }
        report.folds.push_back(std::move(result));
    }

    NamedWeights<float> weights = init_weights<float>(config, sgd.seed);
    NamedWeights<float> velocity = zero_velocity(weights);
    Rng rng = master.fork();
    if (log) *log << "final fit on all records\n";
    std::vector<Index> all(std::size_t(data.size()));
    for (Index i = 0; i < data.size(); ++i) all[std::size_t(i)] = i;
    report.final_epoch_loss = run_epochs(weights, velocity, data, all, config, sgd, sgd.epochs, rng, log);
    save_checkpoint(weights, config, checkpoint);
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

MetricReport evaluate(const NamedWeights<float>& weights, const PbanConfig& config, const Manifest& manifest) {
    if (manifest.records.empty()) throw DataError("manifest has no records");
    std::vector<double> pred, mos;
    for (Index i = 0; i < Index(manifest.records.size()); ++i) {
        const auto& rec = manifest.records[std::size_t(i)];
        const std::string where = record_name(manifest, i);
        try {
            pred.push_back(predict_image(weights, config, read_image(rec.sr_path), read_image(rec.hr_path)));
        } catch (const NumericError&) {
            throw;
        } catch (const Error& e) {
            throw DataError(where + ": " + e.what());
        }
        mos.push_back(rec.mos);
    }
    return compute_metrics(pred, mos);
}

}  // namespace pban
