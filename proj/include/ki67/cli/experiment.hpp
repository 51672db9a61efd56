#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ki67/cli/config.hpp"

namespace ki67::cli {

struct DatasetMissingError : Error {
    explicit DatasetMissingError(const std::string& what) : Error(what) {}
};

struct FoldMetrics {
    int fold = 0;
    double source_f1 = 0.0;        // pooled over the held-out gold patches
    double target_f1_mean = 0.0;   // mean of per-TMA F1
    double target_f1_pooled = 0.0;
    double delta_pi = 0.0;         // mean |expert - predicted| over patients
    int best_epoch = -1;
    double best_val_loss = 0.0;
    int zero_cell_tmas = 0;        // TMAs where the detector found nothing
    std::array<int, 5> bin_count{};
    std::array<double, 5> bin_mean_delta{};
};

// One cell of the regime x SS-increment matrix under one root seed.
struct CellMetrics {
    regimes::Regime regime = regimes::Regime::GsOnly;
    long ss_increment = 0;  // 0 for regimes that use no silver data
    std::uint64_t seed = 0;
    std::string dir;        // run directory, relative to the output root

    bool ok = false;
    std::string error;

    std::vector<FoldMetrics> folds;
    double source_f1_mean = 0.0, source_f1_sd = 0.0;
    double target_f1_mean = 0.0, target_f1_sd = 0.0;
    double delta_pi_mean = 0.0, delta_pi_sd = 0.0;

    bool has_embedding = false;
    double overlap = 0.0;      // cross-domain neighbour score of the embedding
    double silhouette = 0.0;   // domain separation of the embedding
    std::string embed_error;
};

struct ExperimentOutcome {
    std::vector<CellMetrics> cells;  // fixed order: regime, increment, seed
    int failed = 0;
    std::string report_path;
    std::string manifest_path;
};

// Runs the full matrix, writing under out_dir:
//   config.ini           copy of the parsed configuration
//   report.json          all metrics; byte-identical across reruns
//   manifest.json        run id, timing, file inventory
//   data/...             generated datasets (unless KI67_CACHE_DIR points
//                        elsewhere)
//   runs/<cell>/seed<S>/fold<F>/   checkpoint.bin, losses.csv, cell.json
//   runs/<cell>/seed<S>/embedding.csv
// Failed cells are recorded and reported; they do not abort the run.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                 const std::string& config_text, std::ostream* log = nullptr);

// Plot-ready CSV renderings of an existing run directory's report.json:
// f1_distribution.csv, delta_pi_by_interval.csv, tsne_coords.csv, anova.csv.
void render_report_csvs(const std::string& run_dir, const std::string& out_dir);

}  // namespace ki67::cli
