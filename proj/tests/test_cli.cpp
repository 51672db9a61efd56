#include <doctest.h>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ki67/cli/config.hpp"
#include "ki67/core/csv_io.hpp"
#include "ki67/core/png_io.hpp"
#include "ki67/core/rng.hpp"
#include "ki67/labels/dataset.hpp"
#include "ki67/labels/heatmap.hpp"
#include "ki67/regimes/model.hpp"
#include "ki67/regimes/train.hpp"
#include "ki67/synth/generator.hpp"

#ifdef _WIN32
#error "POSIX-only test driver"
#endif
#include <sys/wait.h>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ki67;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::path(KI67_TEST_TMP) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd =
        std::string(KI67_CLI_PATH) + " " + args + " > '" + log.string() + "' 2>&1";
    const int rc = std::system(cmd.c_str());
    if (rc == -1) return -1;
    if (WIFEXITED(rc)) return WEXITSTATUS(rc);
    return 128;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE_MESSAGE(bool(in), "cannot open ", p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json read_json(const fs::path& p) { return json::parse(read_file(p)); }

std::string first_line(const std::string& text) {
    return text.substr(0, text.find('\n'));
}

void write_text_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    REQUIRE(bool(out));
    out << text;
}

}  // namespace

// ----- config parsing ---------------------------------------------------------

TEST_CASE("empty config text yields the documented defaults") {
    const auto c = cli::parse_experiment_config_text("", "mem");
    REQUIRE(c.regimes.size() == 2);
    CHECK(c.regimes[0] == regimes::Regime::GsOnly);
    CHECK(c.regimes[1] == regimes::Regime::SsThenGs);
    CHECK(c.ss_increments == std::vector<long>{100});
    CHECK(c.seeds == std::vector<std::uint64_t>{1, 2, 3, 4, 5});
    CHECK(c.folds == 3);
    CHECK(c.gs_patches == 300);
    CHECK(c.patch_size == 256);
    CHECK(c.severity == 0.6);
    CHECK(c.shift_seed == 20230816ull);
    CHECK(c.train.epochs == 30);
    CHECK(c.tsne_perplexity == 15.0);
}

TEST_CASE("config values, lists, comments and regime tokens parse") {
    const std::string text =
        "# leading comment\n"
        "[experiment]\n"
        "regimes = gs, mixed, ss+gs   ; trailing comment\n"
        "seeds = 7, 9\n"
        "ss_increments = 25, 50\n"
        "folds = 4\n"
        "gs_patches = 12\n"
        "\n"
        "[train]\n"
        "epochs = 3\n"
        "learning_rate = 0.002\n"
        "[tsne]\n"
        "perplexity = 3\n";
    const auto c = cli::parse_experiment_config_text(text, "mem");
    REQUIRE(c.regimes.size() == 3);
    CHECK(c.regimes[0] == regimes::Regime::GsOnly);
    CHECK(c.regimes[1] == regimes::Regime::Mixed);
    CHECK(c.regimes[2] == regimes::Regime::SsThenGs);
    CHECK(c.seeds == std::vector<std::uint64_t>{7, 9});
    CHECK(c.ss_increments == std::vector<long>{25, 50});
    CHECK(c.folds == 4);
    CHECK(c.gs_patches == 12);
    CHECK(c.train.epochs == 3);
    CHECK(c.train.learning_rate == 0.002);
    CHECK(c.tsne_perplexity == 3.0);
}

TEST_CASE("config rejects typos with their line number") {
    auto fails_with = [](const std::string& text, const std::string& needle) {
        try {
            cli::parse_experiment_config_text(text, "mem");
            FAIL_CHECK("expected ConfigError for: " << needle);
        } catch (const cli::ConfigError& e) {
            CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos,
                          "got: ", e.what());
        }
    };
    fails_with("[experiment]\n\nfoldz = 3\n", "mem:3");
    fails_with("[experiment]\n\nfoldz = 3\n", "unknown key 'foldz'");
    fails_with("[nope]\n", "unknown section");
    fails_with("folds = 3\n", "before any [section]");
    fails_with("[experiment]\nfolds\n", "expected 'key = value'");
    fails_with("[experiment]\nfolds = 3#x\n", "trailing characters");
    fails_with("[experiment]\nregimes = gs, frobnicate\n", "unknown regime");
}

TEST_CASE("config validation rejects inconsistent settings") {
    CHECK_THROWS_AS(cli::parse_experiment_config_text("[experiment]\nfolds = 0\n", "mem"),
                    cli::ConfigError);
    CHECK_THROWS_AS(cli::parse_experiment_config_text(
                        "[experiment]\ngs_patches = 2\nfolds = 3\n", "mem"),
                    cli::ConfigError);
    // perplexity must fit 2*embed_patches points
    CHECK_THROWS_AS(cli::parse_experiment_config_text(
                        "[experiment]\nembed_patches = 4\n[tsne]\nperplexity = 10\n", "mem"),
                    cli::ConfigError);
    CHECK_THROWS_AS(cli::parse_experiment_config_text("[tsne]\niterations = 100\n", "mem"),
                    cli::ConfigError);
    CHECK_THROWS_AS(cli::parse_experiment_config_text(
                        "[experiment]\npatch_size = 64\neval_tma_size = 32\n", "mem"),
                    cli::ConfigError);
}

TEST_CASE("config hash is canonical: comments and key order do not matter") {
    const auto a = cli::parse_experiment_config_text(
        "[experiment]\nfolds = 4\nseeds = 3, 1\n", "mem");
    const auto b = cli::parse_experiment_config_text(
        "# different text, same meaning\n[experiment]\nseeds = 3, 1\n\nfolds = 4\n", "mem");
    CHECK(cli::config_hash(a) == cli::config_hash(b));
    CHECK(cli::config_hash(a).size() == 16);
    CHECK(cli::config_hash(a).find_first_not_of("0123456789abcdef") == std::string::npos);

    auto c = a;
    c.folds = 5;
    CHECK(cli::config_hash(c) != cli::config_hash(a));

    // jobs only controls scheduling; it must not change the run identity
    auto d = a;
    d.jobs = 7;
    CHECK(cli::config_hash(d) == cli::config_hash(a));
    CHECK(cli::config_canonical_string(a) == cli::config_canonical_string(b));
}

// ----- spawned binary ---------------------------------------------------------

TEST_CASE("cli synth writes images, truth CSVs and a manifest") {
    const auto dir = fresh_dir("cli_synth");
    const auto out = dir / "set";
    const int rc = run_cli("synth --preset source --kind patch --pi 20 --n 2 --seed 5 --size 96 "
                           "--out '" + out.string() + "'",
                           dir / "log.txt");
    REQUIRE_MESSAGE(rc == 0, read_file(dir / "log.txt"));

    const auto man = read_json(out / "manifest.json");
    CHECK(man.at("schema") == "ki67-synth/1");
    CHECK(man.at("count") == 2);
    CHECK(man.at("size") == 96);
    REQUIRE(man.at("images").size() == 2);

    const auto img = read_png_rgb8((out / "images/0000.png").string());
    CHECK(img.width == 96);
    CHECK(img.height == 96);

    // Bit-identical with the library path under the documented seed scheme.
    const auto ref = synth::generate(synth::source_preset(), 20.0, 5ull ^ fnv1a64("img/0"), 96, 96);
    CHECK(img.data == ref.image.data);

    const auto truth = read_centroid_csv((out / "truth/0000.csv").string(), 96, 96, 0.5f);
    REQUIRE(!truth.points.empty());
    const double pi = compute_pi(truth.pos_count(), truth.neg_count()).value;
    CHECK(man.at("images")[0].at("true_pi").get<double>() == doctest::Approx(pi).epsilon(1e-12));
}

TEST_CASE("cli ihcch-detect matches the library pipeline and renders an overlay") {
    const auto dir = fresh_dir("cli_detect");
    const auto s = synth::gen_patch(synth::source_preset(), 25.0, 99, 128);
    write_png_rgb8((dir / "p.png").string(), s.image);

    const int rc = run_cli("ihcch-detect --in '" + (dir / "p.png").string() + "' --out '" +
                               (dir / "det.csv").string() + "' --overlay '" +
                               (dir / "ov.png").string() + "'",
                           dir / "log.txt");
    REQUIRE_MESSAGE(rc == 0, read_file(dir / "log.txt"));

    const auto det = read_centroid_csv((dir / "det.csv").string(), 128, 128, 0.5f);
    CHECK(!det.points.empty());
    const auto ov = read_png_rgb8((dir / "ov.png").string());
    CHECK(ov.width == 128);
    CHECK(ov.height == 128);

    const auto lib = ihcch::run_pipeline(s.image);
    CHECK(det.points.size() == lib.centroids.points.size());
}

TEST_CASE("cli evaluate scores a perfect prediction as pooled F1 = 1") {
    const auto dir = fresh_dir("cli_eval");
    fs::create_directories(dir / "gt");
    fs::create_directories(dir / "pred");
    for (int i = 0; i < 2; ++i) {
        const auto s = synth::gen_patch(synth::source_preset(), 30.0, 300 + i, 96);
        const std::string name = "img" + std::to_string(i) + ".csv";
        write_centroid_csv((dir / "gt" / name).string(), s.truth);
        write_centroid_csv((dir / "pred" / name).string(), s.truth);
    }
    const int rc = run_cli("evaluate --pred-dir '" + (dir / "pred").string() + "' --gt-dir '" +
                               (dir / "gt").string() + "' --out '" + (dir / "rep.json").string() +
                               "'",
                           dir / "log.txt");
    REQUIRE_MESSAGE(rc == 0, read_file(dir / "log.txt"));

    const auto rep = read_json(dir / "rep.json");
    CHECK(rep.at("schema") == "ki67-evaluation/1");
    CHECK(rep.at("images") == 2);
    CHECK(rep.at("pooled").at("f1").get<double>() == 1.0);
    CHECK(rep.at("pooled").at("fp").get<long>() == 0);
    CHECK(rep.at("delta_pi_mean").get<double>() == 0.0);
    CHECK(first_line(read_file(dir / "rep_per_image.csv")) ==
          "file,gt_pos,gt_neg,pred_pos,pred_neg,tp,fp,fn,precision,recall,f1,gt_pi,pred_pi,"
          "delta_pi");

    // A missing prediction file is an error, not a silent skip.
    fs::remove(dir / "pred/img1.csv");
    const int rc2 = run_cli("evaluate --pred-dir '" + (dir / "pred").string() + "' --gt-dir '" +
                                (dir / "gt").string() + "' --out '" + (dir / "rep2.json").string() +
                                "'",
                            dir / "log2.txt");
    CHECK(rc2 != 0);
}

TEST_CASE("cli gen-ss builds a loadable pseudo-labelled dataset") {
    const auto dir = fresh_dir("cli_genss");
    fs::create_directories(dir / "imgs");
    for (int i = 0; i < 2; ++i) {
        const auto s = synth::gen_patch(synth::target_preset(), 25.0, 500 + i, 192);
        write_png_rgb8((dir / "imgs" / ("t" + std::to_string(i) + ".png")).string(), s.image);
    }
    const int rc = run_cli("gen-ss --in '" + (dir / "imgs").string() + "' --out '" +
                               (dir / "ds").string() +
                               "' --budget 3 --patch-size 64 --min-tissue 0.5 --seed 3",
                           dir / "log.txt");
    REQUIRE_MESSAGE(rc == 0, read_file(dir / "log.txt"));

    const auto items = labels::load_dataset((dir / "ds").string());
    REQUIRE(items.size() == 3);
    CHECK(items[0].image.width == 64);
    CHECK(items[0].label.width == 64);
}

TEST_CASE("cli train writes per-fold checkpoints, loss curves and a summary") {
    const auto dir = fresh_dir("cli_train");

    std::vector<labels::LabeledPatch> gs, ss;
    for (int i = 0; i < 6; ++i) {
        const auto s = synth::gen_patch(synth::source_preset(), 20.0, 700 + i, 64);
        gs.push_back(labels::make_labeled_patch(s.image, s.truth, 2.f));
    }
    for (int i = 0; i < 2; ++i) {
        const auto s = synth::gen_patch(synth::target_preset(), 20.0, 800 + i, 64);
        ss.push_back(labels::make_labeled_patch(s.image, s.truth, 2.f));
    }
    labels::save_dataset((dir / "gs").string(), gs, "gs", 1, 2.f, 0.5f);
    labels::save_dataset((dir / "ss").string(), ss, "ss", 1, 2.f, 0.5f);

    const int rc = run_cli("train --regime gs --gs '" + (dir / "gs").string() +
                               "' --folds 2 --seed 4 --epochs 2 --batch-size 2 --out '" +
                               (dir / "run").string() + "'",
                           dir / "log.txt");
    REQUIRE_MESSAGE(rc == 0, read_file(dir / "log.txt"));

    for (int f = 0; f < 2; ++f) {
        const fs::path fd = dir / "run" / ("fold" + std::to_string(f));
        regimes::CheckpointMeta meta;
        const auto model = regimes::load_checkpoint((fd / "checkpoint.bin").string(), &meta);
        CHECK(model.param_count() == 2570);
        CHECK(meta.regime == "gs_only");
        CHECK(meta.arch == regimes::MiniDetector<float>::kArch);
        const auto csv = read_file(fd / "losses.csv");
        CHECK(first_line(csv) == "epoch,stage,train_loss,val_loss,best");
    }
    const auto summary = read_json(dir / "run/train.json");
    CHECK(summary.at("schema") == "ki67-train/1");
    CHECK(summary.at("regime") == "gs_only");
    CHECK(summary.at("folds").size() == 2);

    // Two-stage regime: the losses file carries both stages.
    const int rc2 = run_cli("train --regime ss+gs --gs '" + (dir / "gs").string() + "' --ss '" +
                                (dir / "ss").string() +
                                "' --folds 2 --seed 4 --epochs 2 --batch-size 2 "
                                "--fine-tune-epochs 1 --out '" +
                                (dir / "run2").string() + "'",
                            dir / "log2.txt");
    REQUIRE_MESSAGE(rc2 == 0, read_file(dir / "log2.txt"));
    const auto csv2 = read_file(dir / "run2/fold0/losses.csv");
    CHECK(csv2.find("\n0,1,") != std::string::npos);
    CHECK(csv2.find(",2,") != std::string::npos);  // a stage-2 row exists

    // Regime needing silver data without --ss fails loudly.
    const int rc3 = run_cli("train --regime ss --folds 2 --seed 4 --out '" +
                                (dir / "run3").string() + "'",
                            dir / "log3.txt");
    CHECK(rc3 != 0);
}

TEST_CASE("cli embed writes one projected row per patch") {
    const auto dir = fresh_dir("cli_embed");
    fs::create_directories(dir / "src");
    fs::create_directories(dir / "tgt");
    for (int i = 0; i < 4; ++i) {
        const auto a = synth::gen_patch(synth::source_preset(), 20.0, 900 + i, 64);
        const auto b = synth::gen_patch(synth::target_preset(), 20.0, 950 + i, 64);
        write_png_rgb8((dir / "src" / ("s" + std::to_string(i) + ".png")).string(), a.image);
        write_png_rgb8((dir / "tgt" / ("t" + std::to_string(i) + ".png")).string(), b.image);
    }
    regimes::MiniDetector<float> model;
    model.init(11);
    regimes::save_checkpoint((dir / "ckpt.bin").string(), model, {});

    const int rc = run_cli("embed --checkpoint '" + (dir / "ckpt.bin").string() + "' --patches '" +
                               (dir / "src").string() + "' '" + (dir / "tgt").string() +
                               "' --perplexity 2 --iterations 250 --seed 1 --out '" +
                               (dir / "emb.csv").string() + "'",
                           dir / "log.txt");
    REQUIRE_MESSAGE(rc == 0, read_file(dir / "log.txt"));

    std::istringstream csv(read_file(dir / "emb.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "id,domain,x,y");
    int rows = 0, n_src = 0, n_tgt = 0;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        ++rows;
        if (line.rfind("source/", 0) == 0) ++n_src;
        if (line.rfind("target/", 0) == 0) ++n_tgt;
    }
    CHECK(rows == 8);
    CHECK(n_src == 4);
    CHECK(n_tgt == 4);
}

TEST_CASE("cli experiment: tiny end-to-end run, reproducible and fully inventoried") {
    const auto dir = fresh_dir("cli_experiment");
    const std::string config =
        "[experiment]\n"
        "regimes = gs, ss+gs\n"
        "ss_increments = 2\n"
        "seeds = 1\n"
        "folds = 2\n"
        "gs_patches = 6\n"
        "patch_size = 64\n"
        "ss_images = 1\n"
        "ss_image_size = 192\n"
        "eval_tmas = 2\n"
        "tmas_per_patient = 1\n"
        "eval_tma_size = 128\n"
        "embed_patches = 4\n"
        "[synth]\n"
        "pi_min = 15\n"
        "pi_max = 30\n"
        "[train]\n"
        "epochs = 2\n"
        "batch_size = 2\n"
        "[ihcch]\n"
        "ss_min_tissue_fraction = 0.5\n"
        "[tsne]\n"
        "perplexity = 2\n"
        "iterations = 250\n";
    write_text_file(dir / "cfg.ini", config);

    const int rc = run_cli("experiment --config '" + (dir / "cfg.ini").string() + "' --out '" +
                               (dir / "runA").string() + "'",
                           dir / "logA.txt");
    REQUIRE_MESSAGE(rc == 0, read_file(dir / "logA.txt"));

    const auto rep = read_json(dir / "runA/report.json");
    CHECK(rep.at("schema") == "ki67-experiment-report/1");
    REQUIRE(rep.at("cells").size() == 2);
    for (const auto& cell : rep.at("cells")) {
        REQUIRE_MESSAGE(cell.at("ok").get<bool>(), cell.value("error", std::string()));
        CHECK(cell.at("folds").size() == 2);
        CHECK(cell.at("embedding").contains("overlap"));
    }
    CHECK(rep.at("paired_delta_pi").is_null());  // one seed: nothing to pair
    const auto cfg = cli::parse_experiment_config_text(config, "mem");
    CHECK(rep.at("config_hash").get<std::string>() == cli::config_hash(cfg));

    // Manifest lists every file under the run with true sizes.
    const auto man = read_json(dir / "runA/manifest.json");
    CHECK(man.at("schema") == "ki67-run-manifest/1");
    CHECK(man.at("failed_cells") == 0);
    std::size_t listed = 0;
    for (const auto& row : man.at("files")) {
        const fs::path p = dir / "runA" / row.at("path").get<std::string>();
        REQUIRE_MESSAGE(fs::exists(p), "manifest orphan: ", p.string());
        CHECK(fs::file_size(p) == row.at("bytes").get<std::uint64_t>());
        ++listed;
    }
    std::size_t present = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / "runA"))
        if (e.is_regular_file() && e.path().filename() != "manifest.json") ++present;
    CHECK(listed == present);

    // Plot-ready CSV rendering.
    const int rrc = run_cli("report --run '" + (dir / "runA").string() + "'", dir / "logR.txt");
    REQUIRE_MESSAGE(rrc == 0, read_file(dir / "logR.txt"));
    CHECK(first_line(read_file(dir / "runA/plots/f1_distribution.csv")) ==
          "regime,ss_increment,seed,fold,source_f1,target_f1_mean,target_f1_pooled,delta_pi");
    CHECK(first_line(read_file(dir / "runA/plots/delta_pi_by_interval.csv")) ==
          "regime,ss_increment,interval,patients,mean_delta_pi");
    CHECK(first_line(read_file(dir / "runA/plots/tsne_coords.csv")) ==
          "regime,ss_increment,seed,id,domain,x,y");
    CHECK(first_line(read_file(dir / "runA/plots/anova.csv")) ==
          "metric,regime_a,ss_increment_a,regime_b,ss_increment_b,f,p,error");

    // Rerunning the identical config reproduces the report byte for byte.
    const int rc2 = run_cli("experiment --config '" + (dir / "cfg.ini").string() + "' --out '" +
                                (dir / "runB").string() + "'",
                            dir / "logB.txt");
    REQUIRE_MESSAGE(rc2 == 0, read_file(dir / "logB.txt"));
    CHECK(read_file(dir / "runA/report.json") == read_file(dir / "runB/report.json"));
}
