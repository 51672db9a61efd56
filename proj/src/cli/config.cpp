#include "ki67/cli/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ki67/core/rng.hpp"

namespace ki67::cli {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

struct Cursor {
    const std::string& origin;
    int line;

    [[noreturn]] void fail(const std::string& msg) const {
        throw ConfigError(origin + ":" + std::to_string(line) + ": " + msg);
    }
};

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

long parse_long(const Cursor& at, const std::string& v) {
    try {
        std::size_t used = 0;
        const long x = std::stol(v, &used);
        if (used != v.size()) at.fail("trailing characters in integer '" + v + "'");
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        at.fail("expected an integer, got '" + v + "'");
    }
}

std::uint64_t parse_u64(const Cursor& at, const std::string& v) {
    try {
        std::size_t used = 0;
        const unsigned long long x = std::stoull(v, &used);
        if (used != v.size()) at.fail("trailing characters in integer '" + v + "'");
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        at.fail("expected a non-negative integer, got '" + v + "'");
    }
}

double parse_double(const Cursor& at, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) at.fail("trailing characters in number '" + v + "'");
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        at.fail("expected a number, got '" + v + "'");
    }
}

// CLI regime tokens: the internal names plus the +-style shorthand.
std::optional<regimes::Regime> regime_token(const std::string& s) {
    if (s == "gs" || s == "gs-only") return regimes::Regime::GsOnly;
    if (s == "ss" || s == "ss-only") return regimes::Regime::SsOnly;
    if (s == "gs+ss" || s == "gs_ss") return regimes::Regime::GsThenSs;
    if (s == "ss+gs" || s == "ss_gs") return regimes::Regime::SsThenGs;
    return regimes::regime_from_string(s);
}

void apply_key(ExperimentConfig& c, const Cursor& at, const std::string& section,
               const std::string& key, const std::string& value) {
    if (section == "experiment") {
        if (key == "regimes") {
            c.regimes.clear();
            for (const auto& tok : split_list(value)) {
                const auto r = regime_token(tok);
                if (!r) at.fail("unknown regime '" + tok + "'");
                c.regimes.push_back(*r);
            }
            if (c.regimes.empty()) at.fail("regimes list is empty");
            return;
        }
        if (key == "ss_increments") {
            c.ss_increments.clear();
            for (const auto& tok : split_list(value)) c.ss_increments.push_back(parse_long(at, tok));
            if (c.ss_increments.empty()) at.fail("ss_increments list is empty");
            return;
        }
        if (key == "seeds") {
            c.seeds.clear();
            for (const auto& tok : split_list(value)) c.seeds.push_back(parse_u64(at, tok));
            if (c.seeds.empty()) at.fail("seeds list is empty");
            return;
        }
        if (key == "folds") { c.folds = static_cast<int>(parse_long(at, value)); return; }
        if (key == "gs_patches") { c.gs_patches = static_cast<int>(parse_long(at, value)); return; }
        if (key == "patch_size") { c.patch_size = static_cast<int>(parse_long(at, value)); return; }
        if (key == "ss_images") { c.ss_images = static_cast<int>(parse_long(at, value)); return; }
        if (key == "ss_image_size") { c.ss_image_size = static_cast<int>(parse_long(at, value)); return; }
        if (key == "eval_tmas") { c.eval_tmas = static_cast<int>(parse_long(at, value)); return; }
        if (key == "tmas_per_patient") { c.tmas_per_patient = static_cast<int>(parse_long(at, value)); return; }
        if (key == "eval_tma_size") { c.eval_tma_size = static_cast<int>(parse_long(at, value)); return; }
        if (key == "embed_patches") { c.embed_patches = static_cast<int>(parse_long(at, value)); return; }
        if (key == "jobs") { c.jobs = static_cast<int>(parse_long(at, value)); return; }
    } else if (section == "synth") {
        if (key == "severity") { c.severity = parse_double(at, value); return; }
        if (key == "shift_seed") { c.shift_seed = parse_u64(at, value); return; }
        if (key == "pi_min") { c.pi_min = parse_double(at, value); return; }
        if (key == "pi_max") { c.pi_max = parse_double(at, value); return; }
        if (key == "noise_sigma") { c.noise_sigma = parse_double(at, value); return; }
        if (key == "cell_density") { c.cell_density = parse_double(at, value); return; }
        if (key == "artifact_rate") { c.artifact_rate = parse_double(at, value); return; }
    } else if (section == "train") {
        if (key == "epochs") { c.train.epochs = static_cast<int>(parse_long(at, value)); return; }
        if (key == "batch_size") { c.train.batch_size = static_cast<int>(parse_long(at, value)); return; }
        if (key == "learning_rate") { c.train.learning_rate = parse_double(at, value); return; }
        if (key == "huber_delta") { c.train.huber_delta = parse_double(at, value); return; }
        if (key == "validation_fraction") { c.train.validation_fraction = parse_double(at, value); return; }
        if (key == "fine_tune_epochs") { c.fine_tune_epochs = static_cast<int>(parse_long(at, value)); return; }
        if (key == "fine_tune_lr") { c.fine_tune_lr = parse_double(at, value); return; }
    } else if (section == "ihcch") {
        if (key == "median_window") { c.ihcch.median_window = static_cast<int>(parse_long(at, value)); return; }
        if (key == "background_l_min") { c.ihcch.background_l_min = static_cast<float>(parse_double(at, value)); return; }
        if (key == "background_chroma_max") { c.ihcch.background_chroma_max = static_cast<float>(parse_double(at, value)); return; }
        if (key == "stain_chroma_min") { c.ihcch.stain_chroma_min = static_cast<float>(parse_double(at, value)); return; }
        if (key == "histogram_bins") { c.ihcch.histogram_bins = static_cast<int>(parse_long(at, value)); return; }
        if (key == "peak_min_separation") { c.ihcch.peak_min_separation = static_cast<int>(parse_long(at, value)); return; }
        if (key == "min_nucleus_radius_px") { c.ihcch.min_nucleus_radius_px = static_cast<float>(parse_double(at, value)); return; }
        if (key == "max_nucleus_radius_px") { c.ihcch.max_nucleus_radius_px = static_cast<float>(parse_double(at, value)); return; }
        if (key == "ss_min_tissue_fraction") { c.ss_min_tissue_fraction = parse_double(at, value); return; }
    } else if (section == "labels") {
        if (key == "sigma_px") { c.sigma_px = static_cast<float>(parse_double(at, value)); return; }
        if (key == "peak_threshold") { c.decode.peak_threshold = static_cast<float>(parse_double(at, value)); return; }
        if (key == "min_separation_px") { c.decode.min_separation_px = static_cast<float>(parse_double(at, value)); return; }
    } else if (section == "eval") {
        if (key == "radius_um") { c.radius_um = parse_double(at, value); return; }
        if (key == "microns_per_pixel") { c.microns_per_pixel = static_cast<float>(parse_double(at, value)); return; }
    } else if (section == "tsne") {
        if (key == "perplexity") { c.tsne_perplexity = parse_double(at, value); return; }
        if (key == "iterations") { c.tsne_iterations = static_cast<int>(parse_long(at, value)); return; }
        if (key == "seed") { c.tsne_seed = parse_u64(at, value); return; }
    } else {
        at.fail("unknown section [" + section + "]");
    }
    at.fail("unknown key '" + key + "' in [" + section + "]");
}

}  // namespace

void ExperimentConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (folds < 1) fail("folds must be >= 1");
    if (gs_patches < folds) fail("gs_patches must be >= folds");
    if (folds == 1 && gs_patches < 5) fail("folds=1 needs gs_patches >= 5 for the 80/20 split");
    if (patch_size < 32) fail("patch_size must be >= 32");
    if (ss_image_size < patch_size) fail("ss_image_size must be >= patch_size");
    if (eval_tmas < 1) fail("eval_tmas must be >= 1");
    if (tmas_per_patient < 1) fail("tmas_per_patient must be >= 1");
    if (eval_tmas % tmas_per_patient != 0) fail("eval_tmas must be a multiple of tmas_per_patient");
    if (eval_tma_size < patch_size) fail("eval_tma_size must be >= patch_size");
    if (embed_patches < 1) fail("embed_patches must be >= 1");
    if (jobs < 1) fail("jobs must be >= 1");
    if (severity < 0.0) fail("severity must be >= 0");
    if (!(pi_min >= 0.0 && pi_max <= 100.0 && pi_min <= pi_max)) fail("need 0 <= pi_min <= pi_max <= 100");
    if (noise_sigma < 0.0) fail("noise_sigma must be >= 0");
    if (cell_density <= 0.0) fail("cell_density must be > 0");
    if (artifact_rate < 0.0 || artifact_rate > 1.0) fail("artifact_rate must be in [0,1]");
    for (const long inc : ss_increments)
        if (inc < 1) fail("ss_increments must be positive");
    if (ss_min_tissue_fraction < 0.0 || ss_min_tissue_fraction > 1.0)
        fail("ss_min_tissue_fraction must be in [0,1]");
    if (sigma_px <= 0.f) fail("sigma_px must be > 0");
    if (radius_um <= 0.0) fail("radius_um must be > 0");
    if (microns_per_pixel <= 0.f) fail("microns_per_pixel must be > 0");
    const int n_embed = 2 * embed_patches;
    if (3.0 * tsne_perplexity >= n_embed - 1)
        fail("tsne perplexity too large for 2*embed_patches points");
    if (tsne_iterations < 250) fail("tsne iterations must be >= 250");
    try {
        train.validate();
    } catch (const Error& e) {
        fail(e.what());
    }
}

long ExperimentConfig::max_ss_increment() const {
    return *std::max_element(ss_increments.begin(), ss_increments.end());
}

ExperimentConfig parse_experiment_config_text(const std::string& text, const std::string& origin) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        Cursor at{origin, lineno};
        std::string line = raw;
        // Comments: whole-line, or after at least one space/tab.
        if (const auto t = trim(line); t.empty() || t[0] == '#' || t[0] == ';') continue;
        for (std::size_t i = 0; i + 1 < line.size(); ++i) {
            if ((line[i] == ' ' || line[i] == '\t') && (line[i + 1] == '#' || line[i + 1] == ';')) {
                line = line.substr(0, i);
                break;
            }
        }
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') at.fail("unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) at.fail("empty section name");
            static const char* known[] = {"experiment", "synth", "train", "ihcch", "labels", "eval", "tsne"};
            if (std::find_if(std::begin(known), std::end(known),
                             [&](const char* k) { return section == k; }) == std::end(known))
                at.fail("unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) at.fail("expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) at.fail("empty key");
        if (section.empty()) at.fail("key '" + key + "' appears before any [section]");
        apply_key(cfg, at, section, key, value);
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig parse_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_experiment_config_text(buf.str(), path);
}

std::string config_canonical_string(const ExperimentConfig& c) {
    std::ostringstream out;
    out.precision(17);
    out << "regimes=";
    for (std::size_t i = 0; i < c.regimes.size(); ++i)
        out << (i ? "," : "") << regimes::to_string(c.regimes[i]);
    out << "\nss_increments=";
    for (std::size_t i = 0; i < c.ss_increments.size(); ++i) out << (i ? "," : "") << c.ss_increments[i];
    out << "\nseeds=";
    for (std::size_t i = 0; i < c.seeds.size(); ++i) out << (i ? "," : "") << c.seeds[i];
    out << "\nfolds=" << c.folds << "\ngs_patches=" << c.gs_patches
        << "\npatch_size=" << c.patch_size << "\nss_images=" << c.ss_images
        << "\nss_image_size=" << c.ss_image_size << "\neval_tmas=" << c.eval_tmas
        << "\ntmas_per_patient=" << c.tmas_per_patient << "\neval_tma_size=" << c.eval_tma_size
        << "\nembed_patches=" << c.embed_patches
        << "\nseverity=" << c.severity << "\nshift_seed=" << c.shift_seed
        << "\npi_min=" << c.pi_min << "\npi_max=" << c.pi_max
        << "\nnoise_sigma=" << c.noise_sigma << "\ncell_density=" << c.cell_density
        << "\nartifact_rate=" << c.artifact_rate
        << "\nepochs=" << c.train.epochs << "\nbatch_size=" << c.train.batch_size
        << "\nlearning_rate=" << c.train.learning_rate << "\nhuber_delta=" << c.train.huber_delta
        << "\nvalidation_fraction=" << c.train.validation_fraction
        << "\nfine_tune_epochs=" << c.fine_tune_epochs << "\nfine_tune_lr=" << c.fine_tune_lr
        << "\nmedian_window=" << c.ihcch.median_window
        << "\nbackground_l_min=" << c.ihcch.background_l_min
        << "\nbackground_chroma_max=" << c.ihcch.background_chroma_max
        << "\nstain_chroma_min=" << c.ihcch.stain_chroma_min
        << "\nhistogram_bins=" << c.ihcch.histogram_bins
        << "\npeak_min_separation=" << c.ihcch.peak_min_separation
        << "\nmin_nucleus_radius_px=" << c.ihcch.min_nucleus_radius_px
        << "\nmax_nucleus_radius_px=" << c.ihcch.max_nucleus_radius_px
        << "\nss_min_tissue_fraction=" << c.ss_min_tissue_fraction
        << "\nsigma_px=" << c.sigma_px << "\npeak_threshold=" << c.decode.peak_threshold
        << "\nmin_separation_px=" << c.decode.min_separation_px
        << "\nradius_um=" << c.radius_um << "\nmicrons_per_pixel=" << c.microns_per_pixel
        << "\ntsne_perplexity=" << c.tsne_perplexity << "\ntsne_iterations=" << c.tsne_iterations
        << "\ntsne_seed=" << c.tsne_seed << "\n";
    return out.str();
}

std::string config_hash(const ExperimentConfig& cfg) {
    const auto s = config_canonical_string(cfg);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(s)));
    return buf;
}

}  // namespace ki67::cli
