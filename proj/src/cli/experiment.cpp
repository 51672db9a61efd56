#include "ki67/cli/experiment.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "ki67/core/csv_io.hpp"
#include "ki67/core/png_io.hpp"
#include "ki67/core/rng.hpp"
#include "ki67/embed/tsne.hpp"
#include "ki67/labels/dataset.hpp"
#include "ki67/metrics/matching.hpp"
#include "ki67/metrics/report.hpp"
#include "ki67/metrics/stats.hpp"
#include "ki67/regimes/infer.hpp"
#include "ki67/synth/generator.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ki67::cli {

namespace {

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::uint64_t hash_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot read '" + p.string() + "' for hashing");
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (in.read(buf, sizeof buf) || in.gcount() > 0)
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    return h;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write '" + p.string() + "'");
    out << text;
    if (!out) throw Error("short write to '" + p.string() + "'");
}

std::string iso_utc(std::chrono::system_clock::time_point tp) {
    const std::time_t t = std::chrono::system_clock::to_time_t(tp);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string domain_canonical(const synth::DomainParams& p) {
    std::ostringstream s;
    s.precision(9);
    s << "blue=" << p.blue_stain.L << ',' << p.blue_stain.a << ',' << p.blue_stain.b
      << ";brown=" << p.brown_stain.L << ',' << p.brown_stain.a << ',' << p.brown_stain.b
      << ";bg=" << int(p.background_rgb[0]) << ',' << int(p.background_rgb[1]) << ','
      << int(p.background_rgb[2]) << ";matrix=" << p.tissue_matrix << ','
      << p.tissue_matrix_lab.L << ',' << p.tissue_matrix_lab.a << ',' << p.tissue_matrix_lab.b
      << ',' << p.matrix_mottle_lab << ";r=" << p.nucleus_radius_um << ','
      << p.nucleus_radius_sigma_um << ";dens=" << p.cell_density << ";ovl=" << p.overlap_fraction
      << ";jit=" << p.stain_jitter_lab << ";noise=" << p.sensor_noise_sigma
      << ";art=" << p.artifact_rate << ";mpp=" << p.microns_per_pixel;
    return s.str();
}

std::string ihcch_canonical(const ihcch::IhcchConfig& c) {
    std::ostringstream s;
    s.precision(9);
    s << c.median_window << ',' << c.background_l_min << ',' << c.background_chroma_max << ','
      << c.stain_chroma_min << ',' << c.histogram_bins << ',' << c.peak_min_separation << ','
      << c.min_nucleus_radius_px << ',' << c.max_nucleus_radius_px << ',' << c.microns_per_pixel;
    return s.str();
}

// ----- dataset cache ---------------------------------------------------------

struct CachePlan {
    fs::path out;
    fs::path cache;
    bool cache_inside_out = true;

    fs::path entry(const std::string& kind, std::uint64_t seed, const std::string& key_str) const {
        return cache / (kind + "-s" + std::to_string(seed) + "-" + hex64(fnv1a64(key_str)));
    }
};

struct CacheRegistry {
    std::mutex mu;
    std::vector<std::pair<std::string, std::string>> entries;  // key dir name, path string

    void add(const fs::path& dir, const CachePlan& plan) {
        std::lock_guard<std::mutex> lock(mu);
        const std::string shown = plan.cache_inside_out
                                      ? fs::relative(dir, plan.out).generic_string()
                                      : fs::absolute(dir).generic_string();
        entries.emplace_back(dir.filename().string(), shown);
    }
};

struct EvalTma {
    RgbImage image;
    CentroidSet truth;
    double true_pi = 0.0;
    std::string id;
    std::string patient;
};

struct SeedData {
    std::vector<labels::LabeledPatch> gs;
    std::vector<CentroidSet> gs_truth;
    std::vector<labels::LabeledPatch> ss;  // full budget; increments are prefixes
    std::vector<EvalTma> tmas;
    std::map<std::string, double> expert_pi;
    std::vector<RgbImage> embed_src, embed_tgt;
    regimes::CrossValidation cv;
};

std::string idx4(std::size_t i) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%04zu", i);
    return buf;
}

// Gold standard: source-domain patches with their planted truth. The dataset
// is always read back from disk after generation so a warm rerun trains on
// exactly the same bytes as a cold one.
void ensure_gs(const ExperimentConfig& cfg, const synth::DomainParams& src, std::uint64_t seed,
               const CachePlan& plan, CacheRegistry& reg, SeedData& sd) {
    std::ostringstream key;
    key << "gs\n" << domain_canonical(src) << "\nn=" << cfg.gs_patches
        << "\npatch=" << cfg.patch_size << "\nsigma=" << num(cfg.sigma_px)
        << "\npi=" << num(cfg.pi_min) << ',' << num(cfg.pi_max) << "\nseed=" << seed << "\n";
    const fs::path dir = plan.entry("gs", seed, key.str());
    reg.add(dir, plan);
    if (!fs::exists(dir / "manifest.json")) {
        std::vector<labels::LabeledPatch> items;
        std::vector<CentroidSet> truths;
        Rng pi_rng = Rng::substream(seed, "gs/pi");
        for (int i = 0; i < cfg.gs_patches; ++i) {
            const double pi = pi_rng.uniform(cfg.pi_min, cfg.pi_max);
            const auto s = synth::generate(src, pi, seed ^ fnv1a64("gs/patch/" + std::to_string(i)),
                                           cfg.patch_size, cfg.patch_size);
            items.push_back(labels::make_labeled_patch(s.image, s.truth, cfg.sigma_px));
            truths.push_back(s.truth);
        }
        labels::save_dataset(dir.string(), items, "gs", seed, cfg.sigma_px, cfg.microns_per_pixel);
        fs::create_directories(dir / "truth");
        for (std::size_t i = 0; i < truths.size(); ++i)
            write_centroid_csv((dir / "truth" / (idx4(i) + ".csv")).string(), truths[i]);
        write_text(dir / "key.txt", key.str());
    }
    sd.gs = labels::load_dataset(dir.string());
    sd.gs_truth.clear();
    for (std::size_t i = 0; i < sd.gs.size(); ++i)
        sd.gs_truth.push_back(read_centroid_csv((dir / "truth" / (idx4(i) + ".csv")).string(),
                                                cfg.patch_size, cfg.patch_size,
                                                cfg.microns_per_pixel));
}

// Silver standard: target-domain images pseudo-labelled by the unsupervised
// detector, built once at the largest requested budget (smaller increments
// are prefixes of the same seeded selection).
void ensure_ss(const ExperimentConfig& cfg, const synth::DomainParams& tgt,
               const ihcch::IhcchConfig& icfg, std::uint64_t seed, const CachePlan& plan,
               CacheRegistry& reg, SeedData& sd) {
    const long budget = cfg.max_ss_increment();
    std::ostringstream key;
    key << "ss\n" << domain_canonical(tgt) << "\nihcch=" << ihcch_canonical(icfg)
        << "\nimages=" << cfg.ss_images << "x" << cfg.ss_image_size << "\nbudget=" << budget
        << "\npatch=" << cfg.patch_size << "\nmintissue=" << num(cfg.ss_min_tissue_fraction)
        << "\nsigma=" << num(cfg.sigma_px) << "\npi=" << num(cfg.pi_min) << ',' << num(cfg.pi_max)
        << "\nseed=" << seed << "\n";
    const fs::path dir = plan.entry("ss", seed, key.str());
    reg.add(dir, plan);
    if (!fs::exists(dir / "manifest.json")) {
        std::vector<RgbImage> images;
        Rng pi_rng = Rng::substream(seed, "ss/pi");
        for (int j = 0; j < cfg.ss_images; ++j) {
            const double pi = pi_rng.uniform(cfg.pi_min, cfg.pi_max);
            images.push_back(synth::generate(tgt, pi, seed ^ fnv1a64("ss/img/" + std::to_string(j)),
                                             cfg.ss_image_size, cfg.ss_image_size)
                                 .image);
        }
        labels::SsDatasetSpec spec;
        spec.patch_budget = budget;
        spec.patch_size = cfg.patch_size;
        spec.min_tissue_fraction = cfg.ss_min_tissue_fraction;
        spec.sigma_px = cfg.sigma_px;
        spec.seed = seed ^ fnv1a64("ss/select");
        const auto items = labels::build_ss_dataset(images, icfg, spec);
        labels::save_dataset(dir.string(), items, "ss", seed, cfg.sigma_px, cfg.microns_per_pixel);
        write_text(dir / "key.txt", key.str());
    }
    sd.ss = labels::load_dataset(dir.string());
}

void ensure_eval(const ExperimentConfig& cfg, const synth::DomainParams& tgt, std::uint64_t seed,
                 const CachePlan& plan, CacheRegistry& reg, SeedData& sd) {
    std::ostringstream key;
    key << "eval\n" << domain_canonical(tgt) << "\ntmas=" << cfg.eval_tmas << "x"
        << cfg.eval_tma_size << "\nper_patient=" << cfg.tmas_per_patient << "\npi=" << num(cfg.pi_min)
        << ',' << num(cfg.pi_max) << "\nseed=" << seed << "\n";
    const fs::path dir = plan.entry("eval", seed, key.str());
    reg.add(dir, plan);
    if (!fs::exists(dir / "eval.json")) {
        fs::create_directories(dir);
        json meta;
        meta["schema"] = "ki67-eval-set/1";
        meta["microns_per_pixel"] = cfg.microns_per_pixel;
        meta["size"] = cfg.eval_tma_size;
        json tma_rows = json::array();
        std::map<std::string, std::vector<double>> patient_pis;
        Rng pi_rng = Rng::substream(seed, "eval/pi");
        for (int t = 0; t < cfg.eval_tmas; ++t) {
            const double pi = pi_rng.uniform(cfg.pi_min, cfg.pi_max);
            const auto s = synth::generate(tgt, pi, seed ^ fnv1a64("eval/tma/" + std::to_string(t)),
                                           cfg.eval_tma_size, cfg.eval_tma_size);
            char id[16], pat[16];
            std::snprintf(id, sizeof id, "tma%02d", t);
            std::snprintf(pat, sizeof pat, "p%02d", t / cfg.tmas_per_patient);
            write_png_rgb8((dir / (std::string(id) + ".png")).string(), s.image);
            write_centroid_csv((dir / (std::string(id) + ".csv")).string(), s.truth);
            json row;
            row["id"] = id;
            row["patient"] = pat;
            row["true_pi"] = s.true_pi.value;
            tma_rows.push_back(row);
            patient_pis[pat].push_back(s.true_pi.value);
        }
        meta["tmas"] = tma_rows;
        json experts;
        for (const auto& [pat, pis] : patient_pis) experts[pat] = metrics::mean(pis);
        meta["expert_pi"] = experts;
        write_text(dir / "eval.json", meta.dump(2) + "\n");
        write_text(dir / "key.txt", key.str());
    }
    std::ifstream in(dir / "eval.json");
    json meta;
    in >> meta;
    sd.tmas.clear();
    sd.expert_pi.clear();
    for (const auto& row : meta.at("tmas")) {
        EvalTma tma;
        tma.id = row.at("id").get<std::string>();
        tma.patient = row.at("patient").get<std::string>();
        tma.true_pi = row.at("true_pi").get<double>();
        tma.image = read_png_rgb8((dir / (tma.id + ".png")).string());
        tma.truth = read_centroid_csv((dir / (tma.id + ".csv")).string(), tma.image.width,
                                      tma.image.height, cfg.microns_per_pixel);
        sd.tmas.push_back(std::move(tma));
    }
    for (const auto& [pat, pi] : meta.at("expert_pi").items())
        sd.expert_pi[pat] = pi.get<double>();
}

void ensure_embed(const ExperimentConfig& cfg, const synth::DomainParams& src,
                  const synth::DomainParams& tgt, std::uint64_t seed, const CachePlan& plan,
                  CacheRegistry& reg, SeedData& sd) {
    std::ostringstream key;
    key << "embed\n" << domain_canonical(src) << "\n" << domain_canonical(tgt) << "\nn="
        << cfg.embed_patches << "\npatch=" << cfg.patch_size << "\npi=" << num(cfg.pi_min) << ','
        << num(cfg.pi_max) << "\nseed=" << seed << "\n";
    const fs::path dir = plan.entry("embed", seed, key.str());
    reg.add(dir, plan);
    if (!fs::exists(dir / "key.txt")) {
        fs::create_directories(dir);
        Rng pi_rng = Rng::substream(seed, "embed/pi");
        for (int i = 0; i < cfg.embed_patches; ++i) {
            const double pi_s = pi_rng.uniform(cfg.pi_min, cfg.pi_max);
            const double pi_t = pi_rng.uniform(cfg.pi_min, cfg.pi_max);
            const auto a = synth::generate(src, pi_s, seed ^ fnv1a64("embed/src/" + std::to_string(i)),
                                           cfg.patch_size, cfg.patch_size);
            const auto b = synth::generate(tgt, pi_t, seed ^ fnv1a64("embed/tgt/" + std::to_string(i)),
                                           cfg.patch_size, cfg.patch_size);
            write_png_rgb8((dir / ("source_" + idx4(i) + ".png")).string(), a.image);
            write_png_rgb8((dir / ("target_" + idx4(i) + ".png")).string(), b.image);
        }
        write_text(dir / "key.txt", key.str());
    }
    sd.embed_src.clear();
    sd.embed_tgt.clear();
    for (int i = 0; i < cfg.embed_patches; ++i) {
        sd.embed_src.push_back(read_png_rgb8((dir / ("source_" + idx4(i) + ".png")).string()));
        sd.embed_tgt.push_back(read_png_rgb8((dir / ("target_" + idx4(i) + ".png")).string()));
    }
}

// ----- matrix cells ----------------------------------------------------------

struct CellKey {
    regimes::Regime regime;
    long ss_increment;  // 0 when the regime uses no silver data

    std::string token() const {
        std::string t = regimes::to_string(regime);
        if (ss_increment > 0) t += "_inc" + std::to_string(ss_increment);
        return t;
    }
};

std::vector<CellKey> expand_cells(const ExperimentConfig& cfg) {
    std::vector<long> incs = cfg.ss_increments;
    std::sort(incs.begin(), incs.end());
    incs.erase(std::unique(incs.begin(), incs.end()), incs.end());
    std::vector<CellKey> keys;
    for (const auto r : cfg.regimes) {
        if (r == regimes::Regime::GsOnly) {
            keys.push_back({r, 0});
        } else {
            for (const long inc : incs) keys.push_back({r, inc});
        }
    }
    return keys;
}

struct FoldRun {
    FoldMetrics m;
    regimes::MiniDetector<float> model;
};

metrics::F1Score pooled_f1(long tp, long fp, long fn) {
    metrics::MatchResult r;
    r.tp = tp;
    r.fp = fp;
    r.fn = fn;
    if (tp + fp + fn == 0) return {1.0, 1.0, 1.0};
    return metrics::f1_score(r);
}

FoldRun run_fold(const ExperimentConfig& cfg, const SeedData& sd, const CellKey& key,
                 std::uint64_t seed, int fold, const fs::path& fold_dir) {
    fs::create_directories(fold_dir);

    const auto& held = sd.cv.fold_indices[fold];
    std::vector<char> is_held(sd.gs.size(), 0);
    for (const int i : held) is_held[static_cast<std::size_t>(i)] = 1;
    std::vector<labels::LabeledPatch> gs_train;
    gs_train.reserve(sd.gs.size() - held.size());
    for (std::size_t i = 0; i < sd.gs.size(); ++i)
        if (!is_held[i]) gs_train.push_back(sd.gs[i]);

    std::vector<labels::LabeledPatch> ss_view;
    if (key.ss_increment > 0)
        ss_view.assign(sd.ss.begin(), sd.ss.begin() + key.ss_increment);

    regimes::TrainConfig tc = cfg.train;
    tc.seed = seed ^ fnv1a64("train/" + key.token() + "/fold" + std::to_string(fold));
    std::optional<regimes::TrainConfig> ft;
    if (cfg.fine_tune_epochs >= 0 || cfg.fine_tune_lr >= 0) {
        ft = tc;
        if (cfg.fine_tune_epochs >= 0) ft->epochs = cfg.fine_tune_epochs;
        if (cfg.fine_tune_lr >= 0) ft->learning_rate = cfg.fine_tune_lr;
    }
    const auto res = regimes::run_regime(key.regime, gs_train, ss_view, tc, ft ? &*ft : nullptr);

    regimes::CheckpointMeta meta;
    meta.seed = tc.seed;
    meta.regime = regimes::to_string(key.regime);
    meta.parent_hash = "";
    regimes::save_checkpoint((fold_dir / "checkpoint.bin").string(), res.model, meta);

    const bool two_stage =
        key.regime == regimes::Regime::GsThenSs || key.regime == regimes::Regime::SsThenGs;
    {
        std::ostringstream csv;
        csv << "epoch,stage,train_loss,val_loss,best\n";
        for (std::size_t e = 0; e < res.train_loss.size(); ++e) {
            const int stage = (two_stage && e >= static_cast<std::size_t>(tc.epochs)) ? 2 : 1;
            csv << e << ',' << stage << ',' << num(res.train_loss[e]) << ','
                << num(res.val_loss[e]) << ',' << (static_cast<int>(e) == res.best_epoch ? 1 : 0)
                << "\n";
        }
        write_text(fold_dir / "losses.csv", csv.str());
    }

    FoldRun out;
    out.model = res.model;
    out.m.fold = fold;
    out.m.best_epoch = res.best_epoch;
    out.m.best_val_loss = res.best_epoch >= 0 ? res.val_loss[static_cast<std::size_t>(res.best_epoch)]
                                              : 0.0;

    const metrics::MatchConfig mc{cfg.radius_um};

    long tp = 0, fp = 0, fn = 0;
    for (const int i : held) {
        const auto pred = regimes::detect(res.model, sd.gs[static_cast<std::size_t>(i)].image,
                                          cfg.decode, cfg.microns_per_pixel);
        const auto m = metrics::match_centroids(pred, sd.gs_truth[static_cast<std::size_t>(i)], mc);
        tp += m.tp;
        fp += m.fp;
        fn += m.fn;
    }
    out.m.source_f1 = pooled_f1(tp, fp, fn).f1;

    std::vector<metrics::TmaScore> scores;
    std::vector<double> tma_f1;
    json tma_rows = json::array();
    long ttp = 0, tfp = 0, tfn = 0;
    for (const auto& tma : sd.tmas) {
        const auto pred = regimes::detect(res.model, tma.image, cfg.decode, cfg.microns_per_pixel);
        const auto m = metrics::match_centroids(pred, tma.truth, mc);
        ttp += m.tp;
        tfp += m.fp;
        tfn += m.fn;
        const double f1 = pooled_f1(m.tp, m.fp, m.fn).f1;
        tma_f1.push_back(f1);

        metrics::TmaScore sc;
        sc.tma_id = tma.id;
        sc.patient_id = tma.patient;
        const long pos = pred.pos_count(), neg = pred.neg_count();
        if (pos + neg == 0) {
            ++out.m.zero_cell_tmas;
            sc.predicted = PiScore{0.0, 0, 0};
        } else {
            sc.predicted = compute_pi(pos, neg);
        }
        scores.push_back(sc);

        json row;
        row["id"] = tma.id;
        row["patient"] = tma.patient;
        row["f1"] = f1;
        row["true_pi"] = tma.true_pi;
        row["predicted_pi"] = sc.predicted.value;
        tma_rows.push_back(row);
    }
    out.m.target_f1_mean = metrics::mean(tma_f1);
    out.m.target_f1_pooled = pooled_f1(ttp, tfp, tfn).f1;

    const auto rep = metrics::patient_report(scores, sd.expert_pi);
    out.m.delta_pi = rep.mean_delta_pi;
    for (int b = 0; b < 5; ++b) {
        out.m.bin_count[static_cast<std::size_t>(b)] = rep.bins[b].count;
        out.m.bin_mean_delta[static_cast<std::size_t>(b)] = rep.bins[b].mean_delta_pi;
    }

    json cell;
    cell["regime"] = regimes::to_string(key.regime);
    cell["ss_increment"] = key.ss_increment;
    cell["seed"] = seed;
    cell["fold"] = fold;
    cell["config_hash"] = config_hash(cfg);
    cell["source_f1"] = out.m.source_f1;
    cell["target_f1_mean"] = out.m.target_f1_mean;
    cell["target_f1_pooled"] = out.m.target_f1_pooled;
    cell["delta_pi"] = out.m.delta_pi;
    cell["best_epoch"] = out.m.best_epoch;
    cell["best_val_loss"] = out.m.best_val_loss;
    cell["zero_cell_tmas"] = out.m.zero_cell_tmas;
    json bins = json::array();
    for (int b = 0; b < 5; ++b) {
        json row;
        row["interval"] = metrics::kPiIntervalNames[b];
        row["patients"] = out.m.bin_count[static_cast<std::size_t>(b)];
        row["mean_delta_pi"] = out.m.bin_mean_delta[static_cast<std::size_t>(b)];
        bins.push_back(row);
    }
    cell["bins"] = bins;
    cell["tmas"] = tma_rows;
    write_text(fold_dir / "cell.json", cell.dump(2) + "\n");

    return out;
}

void run_embedding(const ExperimentConfig& cfg, const SeedData& sd,
                   const regimes::MiniDetector<float>& model, std::uint64_t seed,
                   const fs::path& cell_dir, CellMetrics& cm) {
    try {
        std::vector<std::vector<double>> x;
        std::vector<int> tags;
        std::vector<std::string> ids;
        auto add = [&](const std::vector<RgbImage>& imgs, int tag, const char* name) {
            for (std::size_t i = 0; i < imgs.size(); ++i) {
                const auto t = regimes::image_to_tensor(imgs[i]);
                const auto d = regimes::feature_descriptor(model, t);
                x.emplace_back(d.begin(), d.end());
                tags.push_back(tag);
                ids.push_back(std::string(name) + "/" + idx4(i));
            }
        };
        add(sd.embed_src, 0, "source");
        add(sd.embed_tgt, 1, "target");

        embed::TsneConfig tcfg;
        tcfg.perplexity = cfg.tsne_perplexity;
        tcfg.iterations = cfg.tsne_iterations;
        tcfg.seed = cfg.tsne_seed ^ seed;
        const auto res = embed::tsne(x, tcfg);
        cm.overlap = embed::domain_overlap_score(res.y, tags);
        cm.silhouette = embed::silhouette_score(res.y, tags);
        cm.has_embedding = true;

        std::ostringstream csv;
        csv << "id,domain,x,y\n";
        char buf[80];
        for (std::size_t i = 0; i < res.y.size(); ++i) {
            std::snprintf(buf, sizeof buf, ",%.9g,%.9g\n", res.y[i][0], res.y[i][1]);
            csv << ids[i] << ',' << (tags[i] == 0 ? "source" : "target") << buf;
        }
        write_text(cell_dir / "embedding.csv", csv.str());
    } catch (const Error& e) {
        cm.has_embedding = false;
        cm.embed_error = e.what();
    }
}

CellMetrics run_cell(const ExperimentConfig& cfg, const SeedData& sd, const CellKey& key,
                     std::uint64_t seed, const fs::path& out_root) {
    CellMetrics cm;
    cm.regime = key.regime;
    cm.ss_increment = key.ss_increment;
    cm.seed = seed;
    const fs::path cell_dir = out_root / "runs" / key.token() / ("seed" + std::to_string(seed));
    cm.dir = (fs::path("runs") / key.token() / ("seed" + std::to_string(seed))).generic_string();
    try {
        fs::create_directories(cell_dir);
        std::vector<double> src_f1, tgt_f1, dpi;
        regimes::MiniDetector<float> fold0_model;
        const int n_folds = static_cast<int>(sd.cv.fold_indices.size());
        for (int f = 0; f < n_folds; ++f) {
            auto fr = run_fold(cfg, sd, key, seed, f, cell_dir / ("fold" + std::to_string(f)));
            if (f == 0) fold0_model = fr.model;
            src_f1.push_back(fr.m.source_f1);
            tgt_f1.push_back(fr.m.target_f1_mean);
            dpi.push_back(fr.m.delta_pi);
            cm.folds.push_back(fr.m);
        }
        cm.source_f1_mean = metrics::mean(src_f1);
        cm.target_f1_mean = metrics::mean(tgt_f1);
        cm.delta_pi_mean = metrics::mean(dpi);
        cm.source_f1_sd = src_f1.size() >= 2 ? metrics::sample_stddev(src_f1) : 0.0;
        cm.target_f1_sd = tgt_f1.size() >= 2 ? metrics::sample_stddev(tgt_f1) : 0.0;
        cm.delta_pi_sd = dpi.size() >= 2 ? metrics::sample_stddev(dpi) : 0.0;
        run_embedding(cfg, sd, fold0_model, seed, cell_dir, cm);
        cm.ok = true;
    } catch (const Error& e) {
        cm.ok = false;
        cm.error = e.what();
    } catch (const std::exception& e) {
        cm.ok = false;
        cm.error = std::string("unexpected: ") + e.what();
    }
    return cm;
}

// ----- report ---------------------------------------------------------------

json cell_to_json(const CellMetrics& cm) {
    json c;
    c["regime"] = regimes::to_string(cm.regime);
    c["ss_increment"] = cm.ss_increment;
    c["seed"] = cm.seed;
    c["dir"] = cm.dir;
    c["ok"] = cm.ok;
    if (!cm.ok) {
        c["error"] = cm.error;
        return c;
    }
    json folds = json::array();
    for (const auto& f : cm.folds) {
        json fj;
        fj["fold"] = f.fold;
        fj["source_f1"] = f.source_f1;
        fj["target_f1_mean"] = f.target_f1_mean;
        fj["target_f1_pooled"] = f.target_f1_pooled;
        fj["delta_pi"] = f.delta_pi;
        fj["best_epoch"] = f.best_epoch;
        fj["best_val_loss"] = f.best_val_loss;
        fj["zero_cell_tmas"] = f.zero_cell_tmas;
        json bins = json::array();
        for (int b = 0; b < 5; ++b) {
            json row;
            row["interval"] = metrics::kPiIntervalNames[b];
            row["patients"] = f.bin_count[static_cast<std::size_t>(b)];
            row["mean_delta_pi"] = f.bin_mean_delta[static_cast<std::size_t>(b)];
            bins.push_back(row);
        }
        fj["bins"] = bins;
        folds.push_back(fj);
    }
    c["folds"] = folds;
    c["source_f1"] = {{"mean", cm.source_f1_mean}, {"sd", cm.source_f1_sd}};
    c["target_f1"] = {{"mean", cm.target_f1_mean}, {"sd", cm.target_f1_sd}};
    c["delta_pi"] = {{"mean", cm.delta_pi_mean}, {"sd", cm.delta_pi_sd}};
    if (cm.has_embedding)
        c["embedding"] = {{"overlap", cm.overlap}, {"silhouette", cm.silhouette}};
    else
        c["embedding"] = {{"error", cm.embed_error}};
    return c;
}

json build_report(const ExperimentConfig& cfg, const std::vector<CellKey>& keys,
                  const std::vector<CellMetrics>& cells) {
    json j;
    j["schema"] = "ki67-experiment-report/1";
    j["config_hash"] = config_hash(cfg);
    j["folds"] = cfg.folds;
    j["seeds"] = cfg.seeds;
    json regs = json::array();
    for (const auto r : cfg.regimes) regs.push_back(regimes::to_string(r));
    j["regimes"] = regs;
    j["ss_increments"] = cfg.ss_increments;

    json cj = json::array();
    for (const auto& cm : cells) cj.push_back(cell_to_json(cm));
    j["cells"] = cj;

    const std::size_t n_seeds = cfg.seeds.size();
    auto cells_of = [&](std::size_t key_idx) {
        std::vector<const CellMetrics*> v;
        for (std::size_t s = 0; s < n_seeds; ++s) {
            const auto& cm = cells[key_idx * n_seeds + s];
            if (cm.ok) v.push_back(&cm);
        }
        return v;
    };

    json summary = json::array();
    for (std::size_t k = 0; k < keys.size(); ++k) {
        const auto ok = cells_of(k);
        json row;
        row["regime"] = regimes::to_string(keys[k].regime);
        row["ss_increment"] = keys[k].ss_increment;
        row["seeds_ok"] = ok.size();
        auto put = [&](const char* name, auto get) {
            std::vector<double> v;
            for (const auto* c : ok) v.push_back(get(*c));
            json m;
            m["mean"] = v.empty() ? 0.0 : metrics::mean(v);
            m["sd"] = v.size() >= 2 ? metrics::sample_stddev(v) : 0.0;
            row[name] = m;
        };
        put("source_f1", [](const CellMetrics& c) { return c.source_f1_mean; });
        put("target_f1", [](const CellMetrics& c) { return c.target_f1_mean; });
        put("delta_pi", [](const CellMetrics& c) { return c.delta_pi_mean; });
        {
            std::vector<double> v;
            for (const auto* c : ok)
                if (c->has_embedding) v.push_back(c->overlap);
            json m;
            m["mean"] = v.empty() ? 0.0 : metrics::mean(v);
            m["sd"] = v.size() >= 2 ? metrics::sample_stddev(v) : 0.0;
            m["n"] = v.size();
            row["overlap"] = m;
        }
        summary.push_back(row);
    }
    j["summary"] = summary;

    // Central comparison: pseudo-label pre-training + gold fine-tune against
    // gold-only, paired per seed on the patient-level PI error.
    j["paired_delta_pi"] = nullptr;
    {
        std::ptrdiff_t gi = -1, si = -1;
        for (std::size_t k = 0; k < keys.size(); ++k) {
            if (keys[k].regime == regimes::Regime::GsOnly) gi = static_cast<std::ptrdiff_t>(k);
            if (keys[k].regime == regimes::Regime::SsThenGs) si = static_cast<std::ptrdiff_t>(k);
            // keys are increment-ascending per regime, so the last SsThenGs
            // key holds the largest increment.
        }
        if (gi >= 0 && si >= 0) {
            std::vector<double> g, s;
            json seeds_used = json::array();
            for (std::size_t sidx = 0; sidx < n_seeds; ++sidx) {
                const auto& a = cells[static_cast<std::size_t>(gi) * n_seeds + sidx];
                const auto& b = cells[static_cast<std::size_t>(si) * n_seeds + sidx];
                if (a.ok && b.ok) {
                    g.push_back(a.delta_pi_mean);
                    s.push_back(b.delta_pi_mean);
                    seeds_used.push_back(cfg.seeds[sidx]);
                }
            }
            if (g.size() >= 2) {
                json p;
                p["baseline"] = "gs_only";
                p["improved"] = "ss_gs";
                p["ss_increment"] = keys[static_cast<std::size_t>(si)].ss_increment;
                p["metric"] = "delta_pi";
                p["seeds"] = seeds_used;
                p["baseline_values"] = g;
                p["improved_values"] = s;
                p["baseline_mean"] = metrics::mean(g);
                p["improved_mean"] = metrics::mean(s);
                p["p_one_sided"] = metrics::paired_one_sided_p(g, s);
                j["paired_delta_pi"] = p;
            }
        }
    }

    json anova = json::array();
    for (std::size_t a = 0; a < keys.size(); ++a) {
        for (std::size_t b = a + 1; b < keys.size(); ++b) {
            for (const char* metric : {"delta_pi", "target_f1"}) {
                auto values = [&](std::size_t k) {
                    std::vector<double> v;
                    for (const auto* c : cells_of(k))
                        v.push_back(std::string(metric) == "delta_pi" ? c->delta_pi_mean
                                                                      : c->target_f1_mean);
                    return v;
                };
                json row;
                row["metric"] = metric;
                row["a"] = {{"regime", regimes::to_string(keys[a].regime)},
                            {"ss_increment", keys[a].ss_increment}};
                row["b"] = {{"regime", regimes::to_string(keys[b].regime)},
                            {"ss_increment", keys[b].ss_increment}};
                const auto va = values(a), vb = values(b);
                if (va.size() < 2 || vb.size() < 2) {
                    row["error"] = "needs at least two completed seeds per group";
                } else {
                    try {
                        const auto r = metrics::one_way_anova({va, vb});
                        row["f"] = r.f;
                        row["p"] = r.p;
                    } catch (const Error& e) {
                        row["error"] = e.what();
                    }
                }
                anova.push_back(row);
            }
        }
    }
    j["anova"] = anova;
    return j;
}

}  // namespace

ExperimentOutcome run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                 const std::string& config_text, std::ostream* log) {
    const auto started = std::chrono::system_clock::now();
    const auto t0 = std::chrono::steady_clock::now();

    CachePlan plan;
    plan.out = fs::path(out_dir);
    const char* cache_env = std::getenv("KI67_CACHE_DIR");
    if (cache_env && *cache_env) {
        plan.cache = fs::path(cache_env);
        plan.cache_inside_out = false;
    } else {
        plan.cache = plan.out / "data";
        plan.cache_inside_out = true;
    }
    fs::create_directories(plan.out);
    fs::create_directories(plan.cache);
    write_text(plan.out / "config.ini", config_text);

    std::mutex log_mu;
    auto say = [&](const std::string& line) {
        if (!log) return;
        std::lock_guard<std::mutex> lock(log_mu);
        (*log) << line << "\n" << std::flush;
    };

    synth::DomainParams src = synth::source_preset();
    src.sensor_noise_sigma = static_cast<float>(cfg.noise_sigma);
    src.cell_density = static_cast<float>(cfg.cell_density);
    src.artifact_rate = static_cast<float>(cfg.artifact_rate);
    src.microns_per_pixel = cfg.microns_per_pixel;
    const synth::DomainParams tgt = synth::shift_domain(src, cfg.severity, cfg.shift_seed);

    ihcch::IhcchConfig icfg = cfg.ihcch;
    icfg.microns_per_pixel = cfg.microns_per_pixel;

    const auto keys = expand_cells(cfg);
    const std::size_t n_seeds = cfg.seeds.size();
    const bool any_ss = std::any_of(keys.begin(), keys.end(),
                                    [](const CellKey& k) { return k.ss_increment > 0; });

    ExperimentOutcome outcome;
    outcome.cells.resize(keys.size() * n_seeds);
    CacheRegistry reg;

    for (std::size_t sidx = 0; sidx < n_seeds; ++sidx) {
        const std::uint64_t seed = cfg.seeds[sidx];
        SeedData sd;
        ensure_gs(cfg, src, seed, plan, reg, sd);
        if (any_ss) ensure_ss(cfg, tgt, icfg, seed, plan, reg, sd);
        ensure_eval(cfg, tgt, seed, plan, reg, sd);
        ensure_embed(cfg, src, tgt, seed, plan, reg, sd);
        if (cfg.folds >= 2) {
            sd.cv = regimes::make_folds(static_cast<int>(sd.gs.size()), cfg.folds,
                                        seed ^ fnv1a64("folds"));
        } else {
            // Single 80/20 split: hold out the first of five round-robin folds.
            const auto five = regimes::make_folds(static_cast<int>(sd.gs.size()), 5,
                                                  seed ^ fnv1a64("folds"));
            sd.cv.fold_indices = {five.fold_indices[0]};
        }
        say("[seed " + std::to_string(seed) + "] datasets ready: gs=" + std::to_string(sd.gs.size()) +
            " ss=" + std::to_string(sd.ss.size()) + " tmas=" + std::to_string(sd.tmas.size()) +
            " embed=2x" + std::to_string(sd.embed_src.size()));

        const int jobs = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(keys.size())));
        auto work = [&](std::size_t k) {
            auto cm = run_cell(cfg, sd, keys[k], seed, plan.out);
            std::ostringstream line;
            line << "[seed " << seed << "] " << keys[k].token();
            if (cm.ok) {
                line.precision(4);
                line << ": source_f1=" << cm.source_f1_mean << " target_f1=" << cm.target_f1_mean
                     << " delta_pi=" << cm.delta_pi_mean;
                if (cm.has_embedding) line << " overlap=" << cm.overlap;
            } else {
                line << " FAILED: " << cm.error;
            }
            say(line.str());
            outcome.cells[k * n_seeds + sidx] = std::move(cm);
        };
        if (jobs <= 1) {
            for (std::size_t k = 0; k < keys.size(); ++k) work(k);
        } else {
            std::atomic<std::size_t> next{0};
            std::vector<std::thread> workers;
            for (int w = 0; w < jobs; ++w)
                workers.emplace_back([&] {
                    for (std::size_t k = next.fetch_add(1); k < keys.size(); k = next.fetch_add(1))
                        work(k);
                });
            for (auto& w : workers) w.join();
        }
    }

    for (const auto& cm : outcome.cells)
        if (!cm.ok) ++outcome.failed;

    const json report = build_report(cfg, keys, outcome.cells);
    const fs::path report_path = plan.out / "report.json";
    write_text(report_path, report.dump(2) + "\n");
    outcome.report_path = report_path.string();

    // Manifest: inventory of every file under the output root (and the cache
    // entries used), with timing. Written last; lists everything but itself.
    const auto finished = std::chrono::system_clock::now();
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json manifest;
    manifest["schema"] = "ki67-run-manifest/1";
    manifest["tool_version"] = "0.1.0";
    manifest["config_hash"] = config_hash(cfg);
    manifest["run_id"] = config_hash(cfg) + "-" + iso_utc(started);
    manifest["started"] = iso_utc(started);
    manifest["finished"] = iso_utc(finished);
    manifest["wall_seconds"] = wall;
    manifest["jobs"] = cfg.jobs;
    manifest["cache_dir"] = plan.cache_inside_out ? std::string("data")
                                                  : fs::absolute(plan.cache).generic_string();
    manifest["seeds"] = cfg.seeds;
    manifest["failed_cells"] = outcome.failed;
    {
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(plan.out))
            if (e.is_regular_file() && e.path().filename() != "manifest.json")
                files.push_back(e.path());
        std::sort(files.begin(), files.end());
        json rows = json::array();
        for (const auto& f : files) {
            json row;
            row["path"] = fs::relative(f, plan.out).generic_string();
            row["bytes"] = static_cast<std::uint64_t>(fs::file_size(f));
            row["fnv1a64"] = hex64(hash_file(f));
            rows.push_back(row);
        }
        manifest["files"] = rows;
    }
    {
        std::sort(reg.entries.begin(), reg.entries.end());
        reg.entries.erase(std::unique(reg.entries.begin(), reg.entries.end()), reg.entries.end());
        json rows = json::array();
        for (const auto& [key, path] : reg.entries) {
            json row;
            row["key"] = key;
            row["path"] = path;
            rows.push_back(row);
        }
        manifest["datasets"] = rows;
    }
    const fs::path manifest_path = plan.out / "manifest.json";
    write_text(manifest_path, manifest.dump(2) + "\n");
    outcome.manifest_path = manifest_path.string();

    say("report: " + outcome.report_path + (outcome.failed ? " (with failed cells)" : ""));
    return outcome;
}

// ----- plot-ready CSV rendering ----------------------------------------------

void render_report_csvs(const std::string& run_dir, const std::string& out_dir) {
    const fs::path run(run_dir);
    std::ifstream in(run / "report.json");
    if (!in) throw Error("no report.json under '" + run_dir + "'");
    json rep;
    in >> rep;
    if (rep.value("schema", "") != "ki67-experiment-report/1")
        throw Error("unrecognized report schema in '" + run_dir + "'");

    fs::create_directories(out_dir);
    const fs::path out(out_dir);

    {
        std::ostringstream csv;
        csv << "regime,ss_increment,seed,fold,source_f1,target_f1_mean,target_f1_pooled,delta_pi\n";
        for (const auto& c : rep.at("cells")) {
            if (!c.at("ok").get<bool>()) continue;
            for (const auto& f : c.at("folds")) {
                csv << c.at("regime").get<std::string>() << ',' << c.at("ss_increment").get<long>()
                    << ',' << c.at("seed").get<std::uint64_t>() << ',' << f.at("fold").get<int>()
                    << ',' << num(f.at("source_f1").get<double>()) << ','
                    << num(f.at("target_f1_mean").get<double>()) << ','
                    << num(f.at("target_f1_pooled").get<double>()) << ','
                    << num(f.at("delta_pi").get<double>()) << "\n";
            }
        }
        write_text(out / "f1_distribution.csv", csv.str());
    }

    {
        // Aggregate the per-fold interval rows patient-weighted per cell key.
        struct Acc {
            long patients = 0;
            double weighted = 0.0;
        };
        std::map<std::pair<std::string, long>, std::array<Acc, 5>> acc;
        std::vector<std::pair<std::string, long>> order;
        for (const auto& c : rep.at("cells")) {
            if (!c.at("ok").get<bool>()) continue;
            const std::pair<std::string, long> key{c.at("regime").get<std::string>(),
                                                   c.at("ss_increment").get<long>()};
            if (!acc.count(key)) order.push_back(key);
            auto& slots = acc[key];
            for (const auto& f : c.at("folds")) {
                const auto& bins = f.at("bins");
                for (std::size_t b = 0; b < 5; ++b) {
                    const long n = bins[b].at("patients").get<long>();
                    slots[b].patients += n;
                    slots[b].weighted +=
                        static_cast<double>(n) * bins[b].at("mean_delta_pi").get<double>();
                }
            }
        }
        std::ostringstream csv;
        csv << "regime,ss_increment,interval,patients,mean_delta_pi\n";
        for (const auto& key : order) {
            const auto& slots = acc[key];
            for (std::size_t b = 0; b < 5; ++b) {
                const double m = slots[b].patients ? slots[b].weighted / slots[b].patients : 0.0;
                csv << key.first << ',' << key.second << ',' << metrics::kPiIntervalNames[b] << ','
                    << slots[b].patients << ',' << num(m) << "\n";
            }
        }
        write_text(out / "delta_pi_by_interval.csv", csv.str());
    }

    {
        std::ostringstream csv;
        csv << "regime,ss_increment,seed,id,domain,x,y\n";
        for (const auto& c : rep.at("cells")) {
            if (!c.at("ok").get<bool>()) continue;
            const fs::path emb = run / c.at("dir").get<std::string>() / "embedding.csv";
            if (!fs::exists(emb)) continue;
            std::ifstream ein(emb);
            std::string line;
            bool header = true;
            while (std::getline(ein, line)) {
                if (header) {
                    header = false;
                    continue;
                }
                if (line.empty()) continue;
                csv << c.at("regime").get<std::string>() << ',' << c.at("ss_increment").get<long>()
                    << ',' << c.at("seed").get<std::uint64_t>() << ',' << line << "\n";
            }
        }
        write_text(out / "tsne_coords.csv", csv.str());
    }

    {
        std::ostringstream csv;
        csv << "metric,regime_a,ss_increment_a,regime_b,ss_increment_b,f,p,error\n";
        for (const auto& row : rep.at("anova")) {
            csv << row.at("metric").get<std::string>() << ','
                << row.at("a").at("regime").get<std::string>() << ','
                << row.at("a").at("ss_increment").get<long>() << ','
                << row.at("b").at("regime").get<std::string>() << ','
                << row.at("b").at("ss_increment").get<long>() << ',';
            if (row.contains("f"))
                csv << num(row.at("f").get<double>()) << ',' << num(row.at("p").get<double>()) << ",";
            else
                csv << ",," << row.at("error").get<std::string>();
            csv << "\n";
        }
        write_text(out / "anova.csv", csv.str());
    }
}

}  // namespace ki67::cli
