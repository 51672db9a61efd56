#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ki67/core/types.hpp"
#include "ki67/ihcch/ihcch.hpp"
#include "ki67/labels/heatmap.hpp"
#include "ki67/regimes/train.hpp"

namespace ki67::cli {

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(what) {}
};

// Everything one `experiment` run needs, parsed from a sectioned key-value
// file. Unknown sections or keys are rejected with their line number so a
// typo cannot silently fall back to a default.
struct ExperimentConfig {
    // [experiment]
    std::vector<regimes::Regime> regimes{regimes::Regime::GsOnly, regimes::Regime::SsThenGs};
    std::vector<long> ss_increments{100};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    int folds = 3;
    int gs_patches = 300;
    int patch_size = 256;
    int ss_images = 3;          // target images feeding the pseudo-label builder
    int ss_image_size = 1536;
    int eval_tmas = 6;
    int tmas_per_patient = 2;
    int eval_tma_size = 1024;
    int embed_patches = 30;     // per domain
    int jobs = 1;

    // [synth]
    double severity = 0.6;
    std::uint64_t shift_seed = 20230816;
    double pi_min = 5.0;
    double pi_max = 45.0;
    double noise_sigma = 2.0;
    double cell_density = 12.0;
    double artifact_rate = 0.0;

    // [train]
    regimes::TrainConfig train;   // .seed is ignored; per-cell seeds are derived
    int fine_tune_epochs = -1;    // < 0: same as train.epochs
    double fine_tune_lr = -1.0;   // < 0: same as train.learning_rate

    // [ihcch]
    ihcch::IhcchConfig ihcch;
    double ss_min_tissue_fraction = 0.8;

    // [labels]
    float sigma_px = 2.f;
    labels::DecodeConfig decode;

    // [eval]
    double radius_um = 6.0;
    float microns_per_pixel = 0.5f;

    // [tsne]
    double tsne_perplexity = 15.0;
    int tsne_iterations = 1000;
    std::uint64_t tsne_seed = 7;

    void validate() const;  // throws ConfigError on inconsistent values

    long max_ss_increment() const;
};

ExperimentConfig parse_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config_text(const std::string& text, const std::string& origin);

// Canonical key=value rendering of every field, independent of comments or
// key order in the source file; its FNV-1a hash identifies the run.
std::string config_canonical_string(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace ki67::cli
