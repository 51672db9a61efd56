#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ki67/core/types.hpp"
#include "ki67/ihcch/ihcch.hpp"
#include "ki67/labels/heatmap.hpp"

namespace ki67::labels {

struct InsufficientPatchesError : Error {
    InsufficientPatchesError(const std::string& what, long found_, long wanted_)
        : Error(what), found(found_), wanted(wanted_) {}
    long found;
    long wanted;
};

struct Patch {
    RgbImage image;
    int origin_x = 0;
    int origin_y = 0;
    int source_index = 0;  // which input image the patch came from
};

// Non-overlapping tiling (stride = patch size); partial border tiles are
// dropped. patch_size must fit inside the image.
std::vector<Patch> tile_image(const RgbImage& img, int patch_size, int source_index = 0);

// Fraction of pixels flagged as tissue.
double tissue_fraction(const std::vector<std::uint8_t>& tissue_mask);

// One training example: an RGB patch and its two-channel target.
struct LabeledPatch {
    RgbImage image;
    Heatmap label;
    int source_index = 0;
    int origin_x = 0;
    int origin_y = 0;
};

struct SsDatasetSpec {
    long patch_budget = 100;        // how many qualifying patches to keep
    int patch_size = 256;
    double min_tissue_fraction = 0.8;
    float sigma_px = 2.f;
    std::uint64_t seed = 1;         // selection shuffle
};

// Silver-standard dataset: tile the images, keep patches whose tissue
// fraction passes the cut, run the unsupervised detector on each, and render
// its detections as heat-map targets. Selection among qualifying patches is a
// seeded shuffle, so a larger budget with the same seed keeps smaller budgets
// as prefixes. Throws InsufficientPatchesError when fewer qualifying patches
// exist than the budget asks for.
std::vector<LabeledPatch> build_ss_dataset(const std::vector<RgbImage>& images,
                                           const ihcch::IhcchConfig& ihcch_cfg,
                                           const SsDatasetSpec& spec);

// Gold-standard flavour: pair externally supplied centroid annotations with
// their patches, rendering the same heat-map targets.
LabeledPatch make_labeled_patch(const RgbImage& image, const CentroidSet& truth, float sigma_px);

// On-disk layout: <dir>/patches/NNNN.png, <dir>/labels/NNNN_neg.png and
// NNNN_pos.png (16-bit grayscale, value = round(65535 * p)), plus a
// manifest.json describing how the set was built.
void save_dataset(const std::string& dir, const std::vector<LabeledPatch>& items,
                  const std::string& kind, std::uint64_t seed, float sigma_px,
                  float microns_per_pixel);

std::vector<LabeledPatch> load_dataset(const std::string& dir);

}  // namespace ki67::labels
