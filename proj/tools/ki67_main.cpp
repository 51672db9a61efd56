#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ki67/cli/config.hpp"
#include "ki67/cli/experiment.hpp"
#include "ki67/core/csv_io.hpp"
#include "ki67/core/png_io.hpp"
#include "ki67/core/rng.hpp"
#include "ki67/embed/tsne.hpp"
#include "ki67/ihcch/ihcch.hpp"
#include "ki67/labels/dataset.hpp"
#include "ki67/metrics/matching.hpp"
#include "ki67/metrics/stats.hpp"
#include "ki67/regimes/infer.hpp"
#include "ki67/regimes/train.hpp"
#include "ki67/synth/generator.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ki67;

namespace {

std::string idx4(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04zu", i);
    return buf;
}

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write '" + p.string() + "'");
    out << text;
    if (!out) throw Error("short write to '" + p.string() + "'");
}

std::vector<fs::path> list_pngs(const std::string& dir) {
    if (!fs::is_directory(dir)) throw Error("'" + dir + "' is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error("no .png files under '" + dir + "'");
    return files;
}

std::optional<regimes::Regime> regime_token(const std::string& s) {
    if (s == "gs") return regimes::Regime::GsOnly;
    if (s == "ss") return regimes::Regime::SsOnly;
    if (s == "gs+ss") return regimes::Regime::GsThenSs;
    if (s == "ss+gs") return regimes::Regime::SsThenGs;
    return regimes::regime_from_string(s);
}

void draw_cross(RgbImage& img, float cx, float cy, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    const int x0 = static_cast<int>(std::lround(cx - 0.5f));
    const int y0 = static_cast<int>(std::lround(cy - 0.5f));
    for (int d = -4; d <= 4; ++d) {
        const int xs[2] = {x0 + d, x0};
        const int ys[2] = {y0, y0 + d};
        for (int k = 0; k < 2; ++k) {
            if (xs[k] < 0 || xs[k] >= img.width || ys[k] < 0 || ys[k] >= img.height) continue;
            img.at(xs[k], ys[k], 0) = r;
            img.at(xs[k], ys[k], 1) = g;
            img.at(xs[k], ys[k], 2) = b;
        }
    }
}

// ----- synth -----------------------------------------------------------------

struct SynthArgs {
    std::string preset = "source";
    std::string kind = "patch";
    double pi = 20.0;
    int n = 1;
    std::uint64_t seed = 1;
    std::string out;
    int size = 0;  // 0: kind default
    double severity = 0.6;
    std::uint64_t shift_seed = synth::kTargetShiftSeed;
};

int cmd_synth(const SynthArgs& a) {
    synth::DomainParams params = synth::source_preset();
    if (a.preset == "target") params = synth::shift_domain(params, a.severity, a.shift_seed);
    const int size = a.size > 0 ? a.size : (a.kind == "tma" ? 2000 : 256);

    fs::create_directories(fs::path(a.out) / "images");
    fs::create_directories(fs::path(a.out) / "truth");
    json rows = json::array();
    for (int i = 0; i < a.n; ++i) {
        const auto s = synth::generate(params, a.pi, a.seed ^ fnv1a64("img/" + std::to_string(i)),
                                       size, size);
        const std::string img_rel = "images/" + idx4(static_cast<std::size_t>(i)) + ".png";
        const std::string csv_rel = "truth/" + idx4(static_cast<std::size_t>(i)) + ".csv";
        write_png_rgb8((fs::path(a.out) / img_rel).string(), s.image);
        write_centroid_csv((fs::path(a.out) / csv_rel).string(), s.truth);
        json row;
        row["image"] = img_rel;
        row["truth"] = csv_rel;
        row["true_pi"] = s.true_pi.value;
        row["nuclei"] = s.truth.points.size();
        row["coverage"] = s.nuclei_coverage;
        rows.push_back(row);
        std::cout << img_rel << ": " << s.truth.points.size() << " nuclei, PI "
                  << s.true_pi.value << "\n";
    }
    json manifest;
    manifest["schema"] = "ki67-synth/1";
    manifest["preset"] = a.preset;
    manifest["kind"] = a.kind;
    manifest["target_pi"] = a.pi;
    manifest["count"] = a.n;
    manifest["seed"] = a.seed;
    manifest["size"] = size;
    manifest["severity"] = a.preset == "target" ? a.severity : 0.0;
    manifest["shift_seed"] = a.shift_seed;
    manifest["microns_per_pixel"] = params.microns_per_pixel;
    manifest["images"] = rows;
    write_text(fs::path(a.out) / "manifest.json", manifest.dump(2) + "\n");
    return 0;
}

// ----- ihcch-detect ----------------------------------------------------------

struct DetectArgs {
    std::string in, out, overlay;
    ihcch::IhcchConfig cfg;
};

int cmd_ihcch_detect(const DetectArgs& a) {
    const auto img = read_png_rgb8(a.in);
    const auto res = ihcch::run_pipeline(img, a.cfg);
    write_centroid_csv(a.out, res.centroids);
    if (!a.overlay.empty()) {
        RgbImage vis = img;
        for (const auto& p : res.centroids.points) {
            if (p.cls == Ki67Class::Pos)
                draw_cross(vis, p.x, p.y, 230, 40, 40);
            else
                draw_cross(vis, p.x, p.y, 40, 200, 90);
        }
        write_png_rgb8(a.overlay, vis);
    }
    const long pos = res.centroids.pos_count(), neg = res.centroids.neg_count();
    std::cout << a.in << ": " << pos << " pos, " << neg << " neg";
    if (pos + neg > 0) std::cout << ", PI " << compute_pi(pos, neg).value;
    std::cout << " (b* threshold " << res.masks.b_threshold << ", "
              << (res.masks.threshold_mode == ihcch::ThresholdMode::HistogramValley
                      ? "histogram valley"
                      : "fixed zero")
              << ")\n";
    return 0;
}

// ----- gen-ss ----------------------------------------------------------------

struct GenSsArgs {
    std::string in, out;
    long budget = 100;
    int patch_size = 256;
    double min_tissue = 0.8;
    double sigma = 2.0;
    std::uint64_t seed = 1;
    float mpp = 0.5f;
    ihcch::IhcchConfig cfg;
};

int cmd_gen_ss(const GenSsArgs& a) {
    std::vector<RgbImage> images;
    for (const auto& f : list_pngs(a.in)) images.push_back(read_png_rgb8(f.string()));
    labels::SsDatasetSpec spec;
    spec.patch_budget = a.budget;
    spec.patch_size = a.patch_size;
    spec.min_tissue_fraction = a.min_tissue;
    spec.sigma_px = static_cast<float>(a.sigma);
    spec.seed = a.seed;
    ihcch::IhcchConfig cfg = a.cfg;
    cfg.microns_per_pixel = a.mpp;
    const auto items = labels::build_ss_dataset(images, cfg, spec);
    labels::save_dataset(a.out, items, "ss", a.seed, spec.sigma_px, a.mpp);
    long cells = 0;
    for (const auto& it : items) {
        labels::DecodeConfig dc;
        cells += static_cast<long>(labels::heatmap_to_centroids(it.label, dc, a.mpp).points.size());
    }
    std::cout << "wrote " << items.size() << " pseudo-labelled patches (" << cells
              << " detections) to " << a.out << "\n";
    return 0;
}

// ----- train -----------------------------------------------------------------

struct TrainArgs {
    std::string regime = "gs_only";
    std::string gs, ss, out;
    long ss_increment = 0;  // 0: use the whole silver set
    int folds = 3;
    std::uint64_t seed = 1;
    regimes::TrainConfig cfg;
    int fine_tune_epochs = -1;
    double fine_tune_lr = -1.0;
};

int cmd_train(const TrainArgs& a) {
    const auto reg = regime_token(a.regime);
    if (!reg) throw Error("unknown regime '" + a.regime + "'");

    std::vector<labels::LabeledPatch> gs, ss;
    if (!a.gs.empty()) gs = labels::load_dataset(a.gs);
    if (!a.ss.empty()) ss = labels::load_dataset(a.ss);
    if (a.ss_increment > 0) {
        if (a.ss_increment > static_cast<long>(ss.size()))
            throw Error("--ss-increment " + std::to_string(a.ss_increment) + " exceeds the " +
                        std::to_string(ss.size()) + " silver patches loaded");
        ss.resize(static_cast<std::size_t>(a.ss_increment));
    }

    // Folds partition the gold set when present (the silver set otherwise);
    // --folds 1 trains a single model on everything.
    const auto& primary = gs.empty() ? ss : gs;
    if (primary.empty()) throw Error("no dataset given (--gs / --ss)");
    std::vector<std::vector<int>> held;
    if (a.folds >= 2) {
        held = regimes::make_folds(static_cast<int>(primary.size()), a.folds,
                                   a.seed ^ fnv1a64("folds"))
                   .fold_indices;
    } else {
        held = {{}};
    }

    fs::create_directories(a.out);
    json fold_rows = json::array();
    for (std::size_t f = 0; f < held.size(); ++f) {
        std::vector<char> is_held(primary.size(), 0);
        for (const int i : held[f]) is_held[static_cast<std::size_t>(i)] = 1;
        std::vector<labels::LabeledPatch> train_primary;
        for (std::size_t i = 0; i < primary.size(); ++i)
            if (!is_held[i]) train_primary.push_back(primary[i]);

        const auto& gs_use = gs.empty() ? gs : train_primary;
        const auto& ss_use = gs.empty() ? train_primary : ss;

        regimes::TrainConfig tc = a.cfg;
        tc.seed = a.seed ^ fnv1a64("fold" + std::to_string(f));
        std::optional<regimes::TrainConfig> ft;
        if (a.fine_tune_epochs >= 0 || a.fine_tune_lr >= 0) {
            ft = tc;
            if (a.fine_tune_epochs >= 0) ft->epochs = a.fine_tune_epochs;
            if (a.fine_tune_lr >= 0) ft->learning_rate = a.fine_tune_lr;
        }
        const auto res = regimes::run_regime(*reg, gs_use, ss_use, tc, ft ? &*ft : nullptr);

        const fs::path fold_dir = fs::path(a.out) / ("fold" + std::to_string(f));
        fs::create_directories(fold_dir);
        regimes::CheckpointMeta meta;
        meta.seed = tc.seed;
        meta.regime = regimes::to_string(*reg);
        regimes::save_checkpoint((fold_dir / "checkpoint.bin").string(), res.model, meta);

        const bool two_stage =
            *reg == regimes::Regime::GsThenSs || *reg == regimes::Regime::SsThenGs;
        std::ostringstream csv;
        csv << "epoch,stage,train_loss,val_loss,best\n";
        for (std::size_t e = 0; e < res.train_loss.size(); ++e) {
            const int stage = (two_stage && e >= static_cast<std::size_t>(tc.epochs)) ? 2 : 1;
            csv << e << ',' << stage << ',' << num(res.train_loss[e]) << ','
                << num(res.val_loss[e]) << ','
                << (static_cast<int>(e) == res.best_epoch ? 1 : 0) << "\n";
        }
        write_text(fold_dir / "losses.csv", csv.str());

        const double best = res.best_epoch >= 0
                                ? res.val_loss[static_cast<std::size_t>(res.best_epoch)]
                                : 0.0;
        json row;
        row["fold"] = f;
        row["held_out"] = held[f].size();
        row["best_epoch"] = res.best_epoch;
        row["best_val_loss"] = best;
        fold_rows.push_back(row);
        std::cout << "fold " << f << ": best epoch " << res.best_epoch << ", val loss " << best
                  << "\n";
    }
    json summary;
    summary["schema"] = "ki67-train/1";
    summary["regime"] = regimes::to_string(*reg);
    summary["seed"] = a.seed;
    summary["folds"] = fold_rows;
    summary["gs_patches"] = gs.size();
    summary["ss_patches"] = ss.size();
    write_text(fs::path(a.out) / "train.json", summary.dump(2) + "\n");
    return 0;
}

// ----- evaluate --------------------------------------------------------------

struct EvalArgs {
    std::string pred_dir, gt_dir, out;
    std::string per_image_csv;
    double radius_um = 6.0;
    float mpp = 0.5f;
};

int cmd_evaluate(const EvalArgs& a) {
    if (!fs::is_directory(a.gt_dir)) throw Error("'" + a.gt_dir + "' is not a directory");
    std::vector<fs::path> gt_files;
    for (const auto& e : fs::directory_iterator(a.gt_dir))
        if (e.is_regular_file() && e.path().extension() == ".csv") gt_files.push_back(e.path());
    std::sort(gt_files.begin(), gt_files.end());
    if (gt_files.empty()) throw Error("no .csv files under '" + a.gt_dir + "'");

    const int extent = 1 << 24;  // bounds are unknown here; accept anything sane
    const metrics::MatchConfig mc{a.radius_um};
    long tp = 0, fp = 0, fn = 0;
    std::vector<double> f1s, dpis;
    std::ostringstream csv;
    csv << "file,gt_pos,gt_neg,pred_pos,pred_neg,tp,fp,fn,precision,recall,f1,gt_pi,pred_pi,"
           "delta_pi\n";
    json rows = json::array();
    for (const auto& gt_path : gt_files) {
        const fs::path pred_path = fs::path(a.pred_dir) / gt_path.filename();
        if (!fs::exists(pred_path))
            throw Error("prediction file missing for '" + gt_path.filename().string() + "'");
        const auto gt = read_centroid_csv(gt_path.string(), extent, extent, a.mpp);
        const auto pred = read_centroid_csv(pred_path.string(), extent, extent, a.mpp);
        const auto m = metrics::match_centroids(pred, gt, mc);
        tp += m.tp;
        fp += m.fp;
        fn += m.fn;
        metrics::F1Score s{0.0, 0.0, 0.0};
        if (m.tp + m.fp + m.fn > 0)
            s = metrics::f1_score(m);
        else
            s = {1.0, 1.0, 1.0};
        f1s.push_back(s.f1);

        auto pi_str = [](long pos, long neg) {
            return pos + neg > 0 ? num(compute_pi(pos, neg).value) : std::string();
        };
        const std::string gt_pi = pi_str(gt.pos_count(), gt.neg_count());
        const std::string pred_pi = pi_str(pred.pos_count(), pred.neg_count());
        std::string dpi;
        if (!gt_pi.empty() && !pred_pi.empty()) {
            const double d = std::fabs(compute_pi(gt.pos_count(), gt.neg_count()).value -
                                       compute_pi(pred.pos_count(), pred.neg_count()).value);
            dpi = num(d);
            dpis.push_back(d);
        }
        csv << gt_path.filename().string() << ',' << gt.pos_count() << ',' << gt.neg_count() << ','
            << pred.pos_count() << ',' << pred.neg_count() << ',' << m.tp << ',' << m.fp << ','
            << m.fn << ',' << num(s.precision) << ',' << num(s.recall) << ',' << num(s.f1) << ','
            << gt_pi << ',' << pred_pi << ',' << dpi << "\n";

        json row;
        row["file"] = gt_path.filename().string();
        row["tp"] = m.tp;
        row["fp"] = m.fp;
        row["fn"] = m.fn;
        row["f1"] = s.f1;
        rows.push_back(row);
    }

    metrics::MatchResult pooled;
    pooled.tp = tp;
    pooled.fp = fp;
    pooled.fn = fn;
    const auto ps = tp + fp + fn > 0 ? metrics::f1_score(pooled) : metrics::F1Score{1.0, 1.0, 1.0};

    json rep;
    rep["schema"] = "ki67-evaluation/1";
    rep["radius_um"] = a.radius_um;
    rep["microns_per_pixel"] = a.mpp;
    rep["images"] = gt_files.size();
    rep["pooled"] = {{"tp", tp},        {"fp", fp},
                     {"fn", fn},        {"precision", ps.precision},
                     {"recall", ps.recall}, {"f1", ps.f1}};
    rep["f1_mean"] = metrics::mean(f1s);
    rep["f1_sd"] = f1s.size() >= 2 ? metrics::sample_stddev(f1s) : 0.0;
    if (!dpis.empty()) {
        rep["delta_pi_mean"] = metrics::mean(dpis);
        rep["delta_pi_sd"] = dpis.size() >= 2 ? metrics::sample_stddev(dpis) : 0.0;
    }
    rep["per_image"] = rows;
    write_text(a.out, rep.dump(2) + "\n");

    std::string per_image = a.per_image_csv;
    if (per_image.empty()) {
        fs::path p(a.out);
        p.replace_extension();
        per_image = p.string() + "_per_image.csv";
    }
    write_text(per_image, csv.str());
    std::cout << "pooled F1 " << ps.f1 << " over " << gt_files.size() << " images (report " << a.out
              << ")\n";
    return 0;
}

// ----- embed -----------------------------------------------------------------

struct EmbedArgs {
    std::string checkpoint;
    std::vector<std::string> patch_dirs;
    std::string tags = "source,target";
    double perplexity = 15.0;
    int iterations = 1000;
    std::uint64_t seed = 7;
    std::string out;
};

int cmd_embed(const EmbedArgs& a) {
    std::vector<std::string> tags;
    {
        std::stringstream ss(a.tags);
        std::string item;
        while (std::getline(ss, item, ',')) tags.push_back(item);
    }
    if (tags.size() != a.patch_dirs.size())
        throw Error("--tags must list one tag per --patches directory");

    const auto model = regimes::load_checkpoint(a.checkpoint);
    std::vector<std::vector<double>> x;
    std::vector<int> tag_idx;
    std::vector<std::string> ids, domains;
    for (std::size_t d = 0; d < a.patch_dirs.size(); ++d) {
        for (const auto& f : list_pngs(a.patch_dirs[d])) {
            const auto img = read_png_rgb8(f.string());
            const auto desc = regimes::feature_descriptor(model, regimes::image_to_tensor(img));
            x.emplace_back(desc.begin(), desc.end());
            tag_idx.push_back(static_cast<int>(d));
            ids.push_back(tags[d] + "/" + f.stem().string());
            domains.push_back(tags[d]);
        }
    }

    embed::TsneConfig cfg;
    cfg.perplexity = a.perplexity;
    cfg.iterations = a.iterations;
    cfg.seed = a.seed;
    const auto res = embed::tsne(x, cfg);

    std::ostringstream csv;
    csv << "id,domain,x,y\n";
    char buf[80];
    for (std::size_t i = 0; i < res.y.size(); ++i) {
        std::snprintf(buf, sizeof buf, ",%.9g,%.9g\n", res.y[i][0], res.y[i][1]);
        csv << ids[i] << ',' << domains[i] << buf;
    }
    write_text(a.out, csv.str());

    std::cout << "embedded " << res.y.size() << " patches";
    if (a.patch_dirs.size() == 2) {
        std::cout << "; overlap " << embed::domain_overlap_score(res.y, tag_idx) << ", silhouette "
                  << embed::silhouette_score(res.y, tag_idx);
    }
    std::cout << " -> " << a.out << "\n";
    return 0;
}

// ----- experiment / report ---------------------------------------------------

int cmd_experiment(const std::string& config_path, const std::string& out_dir, int jobs) {
    std::ifstream in(config_path);
    if (!in) throw Error("cannot open config file '" + config_path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    auto cfg = cli::parse_experiment_config_text(buf.str(), config_path);
    if (jobs > 0) cfg.jobs = jobs;
    const auto outcome = cli::run_experiment(cfg, out_dir, buf.str(), &std::cout);
    if (outcome.failed > 0) {
        std::cerr << "failed cells:\n";
        for (const auto& cm : outcome.cells)
            if (!cm.ok)
                std::cerr << "  " << regimes::to_string(cm.regime) << " inc=" << cm.ss_increment
                          << " seed=" << cm.seed << ": " << cm.error << "\n";
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Ki-67 proliferation index: detection, domain adaptation and evaluation"};
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic stained images with ground truth");
    synth_cmd->add_option("--preset", sa.preset)->check(CLI::IsMember({"source", "target"}))
        ->capture_default_str();
    synth_cmd->add_option("--kind", sa.kind)->check(CLI::IsMember({"patch", "tma"}))
        ->capture_default_str();
    synth_cmd->add_option("--pi", sa.pi, "Target proliferation index, percent")->capture_default_str();
    synth_cmd->add_option("--n", sa.n, "Number of images")->capture_default_str();
    synth_cmd->add_option("--seed", sa.seed)->capture_default_str();
    synth_cmd->add_option("--out", sa.out, "Output directory")->required();
    synth_cmd->add_option("--size", sa.size, "Pixel size (0 = kind default)")->capture_default_str();
    synth_cmd->add_option("--severity", sa.severity, "Domain shift severity for --preset target")
        ->capture_default_str();
    synth_cmd->add_option("--shift-seed", sa.shift_seed)->capture_default_str();

    DetectArgs da;
    auto* det_cmd = app.add_subcommand("ihcch-detect", "Unsupervised nuclei detection on one image");
    det_cmd->add_option("--in", da.in, "Input PNG")->required();
    det_cmd->add_option("--out", da.out, "Output centroid CSV")->required();
    det_cmd->add_option("--median-window", da.cfg.median_window)->capture_default_str();
    det_cmd->add_option("--bg-l", da.cfg.background_l_min, "Background L* threshold")
        ->capture_default_str();
    det_cmd->add_option("--bg-chroma", da.cfg.background_chroma_max)->capture_default_str();
    det_cmd->add_option("--chroma-min", da.cfg.stain_chroma_min)->capture_default_str();
    det_cmd->add_option("--bins", da.cfg.histogram_bins)->capture_default_str();
    det_cmd->add_option("--min-radius", da.cfg.min_nucleus_radius_px)->capture_default_str();
    det_cmd->add_option("--max-radius", da.cfg.max_nucleus_radius_px)->capture_default_str();
    det_cmd->add_option("--mpp", da.cfg.microns_per_pixel)->capture_default_str();
    det_cmd->add_option("--overlay", da.overlay, "Debug overlay PNG");

    GenSsArgs ga;
    auto* ss_cmd = app.add_subcommand("gen-ss", "Build a pseudo-labelled dataset from target images");
    ss_cmd->add_option("--in", ga.in, "Directory of PNG images")->required();
    ss_cmd->add_option("--out", ga.out, "Dataset directory")->required();
    ss_cmd->add_option("--budget", ga.budget, "Patches to keep")->capture_default_str();
    ss_cmd->add_option("--patch-size", ga.patch_size)->capture_default_str();
    ss_cmd->add_option("--min-tissue", ga.min_tissue)->capture_default_str();
    ss_cmd->add_option("--sigma", ga.sigma, "Label Gaussian sigma, px")->capture_default_str();
    ss_cmd->add_option("--seed", ga.seed)->capture_default_str();
    ss_cmd->add_option("--mpp", ga.mpp)->capture_default_str();
    ss_cmd->add_option("--median-window", ga.cfg.median_window)->capture_default_str();
    ss_cmd->add_option("--bg-l", ga.cfg.background_l_min)->capture_default_str();

    TrainArgs ta;
    auto* tr_cmd = app.add_subcommand("train", "Train the detector under a labelling regime");
    tr_cmd->add_option("--regime", ta.regime, "gs | ss | mixed | gs+ss | ss+gs")
        ->capture_default_str();
    tr_cmd->add_option("--gs", ta.gs, "Gold-standard dataset directory");
    tr_cmd->add_option("--ss", ta.ss, "Silver-standard dataset directory");
    tr_cmd->add_option("--ss-increment", ta.ss_increment, "Use only the first N silver patches")
        ->capture_default_str();
    tr_cmd->add_option("--folds", ta.folds)->capture_default_str();
    tr_cmd->add_option("--seed", ta.seed)->capture_default_str();
    tr_cmd->add_option("--out", ta.out, "Output directory")->required();
    tr_cmd->add_option("--epochs", ta.cfg.epochs)->capture_default_str();
    tr_cmd->add_option("--batch-size", ta.cfg.batch_size)->capture_default_str();
    tr_cmd->add_option("--lr", ta.cfg.learning_rate)->capture_default_str();
    tr_cmd->add_option("--huber-delta", ta.cfg.huber_delta)->capture_default_str();
    tr_cmd->add_option("--val-fraction", ta.cfg.validation_fraction)->capture_default_str();
    tr_cmd->add_option("--fine-tune-epochs", ta.fine_tune_epochs,
                       "Second-stage epochs for two-stage regimes (-1 = same)")
        ->capture_default_str();
    tr_cmd->add_option("--fine-tune-lr", ta.fine_tune_lr)->capture_default_str();

    EvalArgs ea;
    auto* ev_cmd = app.add_subcommand("evaluate", "Match predicted and reference centroid CSVs");
    ev_cmd->add_option("--pred-dir", ea.pred_dir)->required();
    ev_cmd->add_option("--gt-dir", ea.gt_dir)->required();
    ev_cmd->add_option("--radius-um", ea.radius_um)->capture_default_str();
    ev_cmd->add_option("--mpp", ea.mpp)->capture_default_str();
    ev_cmd->add_option("--out", ea.out, "Report JSON path")->required();
    ev_cmd->add_option("--per-image-csv", ea.per_image_csv,
                       "Per-image CSV path (default: next to the report)");

    EmbedArgs ba;
    auto* em_cmd = app.add_subcommand("embed", "Project patch features to 2-D");
    em_cmd->add_option("--checkpoint", ba.checkpoint)->required();
    em_cmd->add_option("--patches", ba.patch_dirs, "One or more patch directories")
        ->required()
        ->expected(1, -1);
    em_cmd->add_option("--tags", ba.tags, "Comma list, one tag per directory")
        ->capture_default_str();
    em_cmd->add_option("--perplexity", ba.perplexity)->capture_default_str();
    em_cmd->add_option("--iterations", ba.iterations)->capture_default_str();
    em_cmd->add_option("--seed", ba.seed)->capture_default_str();
    em_cmd->add_option("--out", ba.out, "Embedding CSV path")->required();

    std::string xp_config, xp_out;
    int xp_jobs = 0;
    auto* xp_cmd = app.add_subcommand("experiment", "Run the full regime x increment matrix");
    xp_cmd->add_option("--config", xp_config, "Experiment config file")->required();
    xp_cmd->add_option("--out", xp_out, "Run directory")->required();
    xp_cmd->add_option("--jobs", xp_jobs, "Parallel matrix cells (overrides the config)");

    std::string rp_run, rp_out;
    auto* rp_cmd = app.add_subcommand("report", "Render plot-ready CSVs from a run directory");
    rp_cmd->add_option("--run", rp_run, "Experiment run directory")->required();
    rp_cmd->add_option("--out", rp_out, "Output directory (default <run>/plots)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth_cmd->parsed()) return cmd_synth(sa);
        if (det_cmd->parsed()) return cmd_ihcch_detect(da);
        if (ss_cmd->parsed()) return cmd_gen_ss(ga);
        if (tr_cmd->parsed()) return cmd_train(ta);
        if (ev_cmd->parsed()) return cmd_evaluate(ea);
        if (em_cmd->parsed()) return cmd_embed(ba);
        if (xp_cmd->parsed()) return cmd_experiment(xp_config, xp_out, xp_jobs);
        if (rp_cmd->parsed())
            return (cli::render_report_csvs(rp_run, rp_out.empty() ? rp_run + "/plots" : rp_out), 0);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
