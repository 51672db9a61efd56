#include "ki67/labels/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "ki67/core/color.hpp"
#include "ki67/core/png_io.hpp"
#include "ki67/core/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ki67::labels {

std::vector<Patch> tile_image(const RgbImage& img, int patch_size, int source_index) {
    if (patch_size <= 0 || patch_size > img.width || patch_size > img.height)
        throw Error("tile_image: patch size must fit inside the image");
    std::vector<Patch> out;
    for (int oy = 0; oy + patch_size <= img.height; oy += patch_size)
        for (int ox = 0; ox + patch_size <= img.width; ox += patch_size) {
            Patch p;
            p.origin_x = ox;
            p.origin_y = oy;
            p.source_index = source_index;
            p.image = RgbImage(patch_size, patch_size);
            for (int y = 0; y < patch_size; ++y)
                for (int x = 0; x < patch_size; ++x)
                    for (int c = 0; c < 3; ++c)
                        p.image.at(x, y, c) = img.at(ox + x, oy + y, c);
            out.push_back(std::move(p));
        }
    return out;
}

double tissue_fraction(const std::vector<std::uint8_t>& tissue_mask) {
    if (tissue_mask.empty()) return 0.0;
    const auto n = std::count(tissue_mask.begin(), tissue_mask.end(), std::uint8_t(1));
    return static_cast<double>(n) / static_cast<double>(tissue_mask.size());
}

LabeledPatch make_labeled_patch(const RgbImage& image, const CentroidSet& truth, float sigma_px) {
    if (truth.width != image.width || truth.height != image.height)
        throw Error("make_labeled_patch: centroid extent does not match the patch");
    LabeledPatch lp;
    lp.image = image;
    lp.label = centroids_to_heatmap(truth, sigma_px);
    return lp;
}

std::vector<LabeledPatch> build_ss_dataset(const std::vector<RgbImage>& images,
                                           const ihcch::IhcchConfig& ihcch_cfg,
                                           const SsDatasetSpec& spec) {
    // Qualifying patches in deterministic order: image index, then tile
    // row-major order.
    std::vector<Patch> qualifying;
    for (std::size_t i = 0; i < images.size(); ++i) {
        for (auto& patch : tile_image(images[i], spec.patch_size, static_cast<int>(i))) {
            const LabImage lab = rgb_to_lab(patch.image);
            if (tissue_fraction(subtract_background(lab, ihcch_cfg)) >= spec.min_tissue_fraction)
                qualifying.push_back(std::move(patch));
        }
    }
    if (static_cast<long>(qualifying.size()) < spec.patch_budget)
        throw InsufficientPatchesError(
            "build_ss_dataset: only " + std::to_string(qualifying.size()) +
                " qualifying patches for a budget of " + std::to_string(spec.patch_budget),
            static_cast<long>(qualifying.size()), spec.patch_budget);

    std::vector<std::size_t> order(qualifying.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    Rng rng(spec.seed);
    rng.shuffle(order);

    std::vector<LabeledPatch> out;
    out.reserve(spec.patch_budget);
    for (long k = 0; k < spec.patch_budget; ++k) {
        const Patch& p = qualifying[order[k]];
        const auto det = ihcch::run_pipeline(p.image, ihcch_cfg);
        LabeledPatch lp = make_labeled_patch(p.image, det.centroids, spec.sigma_px);
        lp.source_index = p.source_index;
        lp.origin_x = p.origin_x;
        lp.origin_y = p.origin_y;
        out.push_back(std::move(lp));
    }
    return out;
}

namespace {

std::string item_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04zu", i);
    return buf;
}

Gray16Image encode_channel(const std::vector<float>& ch, int w, int h) {
    Gray16Image img(w, h);
    for (std::size_t i = 0; i < ch.size(); ++i)
        img.data[i] = static_cast<std::uint16_t>(
            std::lround(std::clamp(ch[i], 0.f, 1.f) * 65535.f));
    return img;
}

std::vector<float> decode_channel(const Gray16Image& img) {
    std::vector<float> ch(img.data.size());
    for (std::size_t i = 0; i < ch.size(); ++i)
        ch[i] = static_cast<float>(img.data[i]) / 65535.f;
    return ch;
}

}  // namespace

void save_dataset(const std::string& dir, const std::vector<LabeledPatch>& items,
                  const std::string& kind, std::uint64_t seed, float sigma_px,
                  float microns_per_pixel) {
    if (items.empty()) throw Error("save_dataset: no items");
    fs::create_directories(fs::path(dir) / "patches");
    fs::create_directories(fs::path(dir) / "labels");
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& it = items[i];
        const std::string name = item_name(i);
        write_png_rgb8((fs::path(dir) / "patches" / (name + ".png")).string(), it.image);
        write_png_gray16((fs::path(dir) / "labels" / (name + "_neg.png")).string(),
                         encode_channel(it.label.neg, it.label.width, it.label.height));
        write_png_gray16((fs::path(dir) / "labels" / (name + "_pos.png")).string(),
                         encode_channel(it.label.pos, it.label.width, it.label.height));
    }
    json manifest;
    manifest["schema"] = "ki67-dataset/1";
    manifest["kind"] = kind;
    manifest["count"] = items.size();
    manifest["patch_size"] = items.front().image.width;
    manifest["sigma_px"] = sigma_px;
    manifest["seed"] = seed;
    manifest["microns_per_pixel"] = microns_per_pixel;
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw Error("save_dataset: cannot write manifest in '" + dir + "'");
    out << manifest.dump(2) << "\n";
}

std::vector<LabeledPatch> load_dataset(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw Error("load_dataset: missing manifest in '" + dir + "'");
    json manifest;
    in >> manifest;
    if (manifest.value("schema", "") != "ki67-dataset/1")
        throw Error("load_dataset: unsupported schema in '" + dir + "'");
    const auto count = manifest.at("count").get<std::size_t>();
    std::vector<LabeledPatch> items;
    items.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::string name = item_name(i);
        LabeledPatch it;
        it.image = read_png_rgb8((fs::path(dir) / "patches" / (name + ".png")).string());
        const auto neg = read_png_gray16((fs::path(dir) / "labels" / (name + "_neg.png")).string());
        const auto pos = read_png_gray16((fs::path(dir) / "labels" / (name + "_pos.png")).string());
        if (neg.width != it.image.width || neg.height != it.image.height ||
            pos.width != neg.width || pos.height != neg.height)
            throw Error("load_dataset: label extent mismatch for item " + name);
        it.label.width = neg.width;
        it.label.height = neg.height;
        it.label.neg = decode_channel(neg);
        it.label.pos = decode_channel(pos);
        items.push_back(std::move(it));
    }
    return items;
}

}  // namespace ki67::labels
