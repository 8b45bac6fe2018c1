#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pban/dataset.hpp"
#include "pban/errors.hpp"
#include "pban/image.hpp"
#include "pban/metrics.hpp"
#include "pban/model.hpp"

namespace pban {

struct SgdConfig {
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-6;
    Index epochs = 100;
    Index batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Zero tensors for every trainable entry of `weights`.
template <typename S>
NamedWeights<S> zero_velocity(const NamedWeights<S>& weights) {
    NamedWeights<S> v;
    for (const auto& [name, t] : weights) {
        if (!is_buffer(name)) v.emplace(name, Tensor<S>::zeros(t.shape()));
    }
    return v;
}

/// g' = g + wd*p; v = momentum*v + g'; p -= lr*v, for every trainable tensor.
/// Buffers are left alone. ContractError if a gradient or velocity is missing
/// or misshapen.
template <typename S>
void sgd_step(NamedWeights<S>& weights, const NamedWeights<S>& grads, NamedWeights<S>& velocity,
              const SgdConfig& cfg) {
    for (auto& [name, p] : weights) {
        if (is_buffer(name)) continue;
        auto g = grads.find(name);
        auto v = velocity.find(name);
        if (g == grads.end()) throw ContractError("sgd_step: no gradient for '" + name + "'");
        if (v == velocity.end()) throw ContractError("sgd_step: no velocity for '" + name + "'");
        if (g->second.shape() != p.shape() || v->second.shape() != p.shape()) {
            throw ContractError("sgd_step: shape mismatch for '" + name + "'");
        }
        const S lr = S(cfg.lr), m = S(cfg.momentum), wd = S(cfg.weight_decay);
        v->second.vec() = m * v->second.vec() + (g->second.vec() + wd * p.vec());
        p.vec() -= lr * v->second.vec();
    }
}

struct FoldSplit {
    Index k = 5;
    std::vector<Index> assignments;  // fold index per record

    std::vector<Index> members(Index fold) const;
    std::vector<Index> complement(Index fold) const;
};

/// Seeded shuffle, then round-robin dealing. ParameterError if n < k or k < 2.
FoldSplit kfold_split(Index n_records, Index k, std::uint64_t seed);

/// Aligned HR/SR patches; each patch carries its image's MOS.
struct PatchDataset {
    std::vector<TensorF> hr;
    std::vector<TensorF> sr;
    std::vector<float> mos;
    std::vector<Index> record;  // manifest row of each patch
    Index size() const { return Index(mos.size()); }
    std::vector<Index> patches_of(const std::vector<Index>& records) const;
};

/// DataError naming the record when a pair differs in size or yields no patch.
PatchDataset build_patch_dataset(const Manifest& manifest, Index patch_size);

/// Stacks the selected patches into [B,3,P,P].
TensorF stack_patches(const std::vector<TensorF>& patches, const std::vector<Index>& ids);

/// Train-mode epochs over seeded-shuffled mini-batches of `ids`. Returns the
/// sample-weighted mean batch loss of every epoch.
std::vector<double> run_epochs(NamedWeights<float>& weights, NamedWeights<float>& velocity,
                               const PatchDataset& data, const std::vector<Index>& ids,
                               const PbanConfig& config, const SgdConfig& sgd, Index epochs, Rng& rng,
                               std::ostream* log = nullptr);

/// Eval-mode predictions for the selected patches, in order.
std::vector<double> predict_patches(const NamedWeights<float>& weights, const PbanConfig& config,
                                    const PatchDataset& data, const std::vector<Index>& ids);

/// Eval-mode MSE over the selected patches.
double dataset_mse(const NamedWeights<float>& weights, const PbanConfig& config, const PatchDataset& data,
                   const std::vector<Index>& ids);

/// Mean eval-mode prediction over the aligned patches of an image pair.
double predict_image(const NamedWeights<float>& weights, const PbanConfig& config, const ImageRGB& sr,
                     const ImageRGB& hr);

struct FoldResult {
    Index fold = 0;
    std::vector<double> epoch_loss;
    std::vector<Index> validation_records;
    std::optional<MetricReport> metrics;
    std::string metrics_error;  // why metrics is empty
};

struct TrainReport {
    std::vector<FoldResult> folds;
    std::vector<double> final_epoch_loss;  // full-set retrain
    std::string final_policy = "retrain on full training set after cross-validation";
    double wall_seconds = 0.0;
    std::filesystem::path checkpoint;
    Index records = 0;
    Index patches = 0;
    SgdConfig sgd;
    Index k = 5;
};

void to_json(nlohmann::json& j, const TrainReport& r);

/// k-fold cross-validation followed by a full-set retrain whose weights are
/// written to `checkpoint`. Deterministic for a given seed.
TrainReport train(const Manifest& manifest, const PbanConfig& config, const SgdConfig& sgd, Index folds,
                  const std::filesystem::path& checkpoint, std::ostream* log = nullptr);

/// Scores every record and computes the metric report against its MOS.
MetricReport evaluate(const NamedWeights<float>& weights, const PbanConfig& config, const Manifest& manifest);

}  // namespace pban
