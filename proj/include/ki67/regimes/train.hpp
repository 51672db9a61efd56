#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ki67/core/rng.hpp"
#include "ki67/labels/dataset.hpp"
#include "ki67/regimes/model.hpp"
#include "ki67/regimes/optim.hpp"

namespace ki67::regimes {

struct EmptyDatasetError : Error {
    explicit EmptyDatasetError(const std::string& what) : Error(what) {}
};
struct MissingDatasetError : Error {
    explicit MissingDatasetError(const std::string& what) : Error(what) {}
};
struct TooFewSamplesError : Error {
    explicit TooFewSamplesError(const std::string& what) : Error(what) {}
};

struct TrainConfig {
    int epochs = 30;
    int batch_size = 4;
    double learning_rate = 1e-3;
    double huber_delta = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double validation_fraction = 0.15;
    std::uint64_t seed = 1;

    void validate() const;
};

// Deterministic 90-degree rotation + isotropic rescale about the centre.
// rot_quarters in {0,1,2,3}; scale in [0.8, 1.2]. The image resamples
// bilinearly with edge clamping; label channels resample bilinearly with
// zero outside. rot_quarters == 0 && scale == 1 is an exact pass-through.
labels::LabeledPatch apply_augment(const labels::LabeledPatch& item, int rot_quarters,
                                   float scale);

// Samples rotation and scale from the stream and applies them.
labels::LabeledPatch augment(const labels::LabeledPatch& item, Rng& rng);

struct TrainResult {
    MiniDetector<float> model;             // best-validation weights
    std::vector<double> train_loss;        // per epoch
    std::vector<double> val_loss;          // per epoch
    int best_epoch = -1;                   // index into the curves
};

// Mini-batch Adam training with augmentation and a seeded validation split
// (15% by default, at least one sample when the set allows it). The returned
// model carries the weights of the epoch with the lowest validation loss.
// Fully deterministic in (model, data order, cfg.seed). epochs == 0 returns
// the input model untouched.
TrainResult train(const MiniDetector<float>& init, const std::vector<labels::LabeledPatch>& data,
                  const TrainConfig& cfg);

enum class Regime { GsOnly, SsOnly, Mixed, GsThenSs, SsThenGs };

const char* to_string(Regime r);
std::optional<Regime> regime_from_string(const std::string& s);

// Gold/silver training regimes. Two-stage regimes restart the optimizer for
// the second stage (same learning rate, fresh Adam moments) and reseed its
// shuffles from a substream so the stages do not replay each other's order.
// fine_tune overrides the second-stage config when given.
TrainResult run_regime(Regime r, const std::vector<labels::LabeledPatch>& gs,
                       const std::vector<labels::LabeledPatch>& ss, const TrainConfig& cfg,
                       const TrainConfig* fine_tune = nullptr);

struct CrossValidation {
    std::vector<std::vector<int>> fold_indices;  // held-out indices per fold
};

// Seeded near-equal partition of [0, n) into folds. folds >= 2, n >= folds.
CrossValidation make_folds(int n, int folds, std::uint64_t seed);

}  // namespace ki67::regimes
