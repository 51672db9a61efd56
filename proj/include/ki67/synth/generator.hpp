#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "ki67/core/types.hpp"

namespace ki67::synth {

struct PlacementOverflowError : Error {
    explicit PlacementOverflowError(const std::string& what) : Error(what) {}
};

struct LabColor {
    float L = 0.f, a = 0.f, b = 0.f;
};

// Everything that characterizes one staining/scanner "domain". A shifted copy
// of these parameters plays the out-of-distribution clinic.
struct DomainParams {
    LabColor blue_stain{42.f, 14.f, -32.f};   // hematoxylin nuclei
    LabColor brown_stain{45.f, 24.f, 34.f};   // DAB (Ki-67+) nuclei
    std::array<std::uint8_t, 3> background_rgb{247, 245, 242};

    // Weakly stained inter-nuclear tissue wash: bright and nearly neutral, so
    // it reads as tissue but stays out of the stain histogram. Disable for
    // bare-background fixtures.
    bool tissue_matrix = true;
    LabColor tissue_matrix_lab{80.5f, 2.5f, 5.5f};
    float matrix_mottle_lab = 1.5f;  // low-frequency L* mottling sigma

    float nucleus_radius_um = 3.0f;        // mean major semi-axis
    float nucleus_radius_sigma_um = 0.45f;
    float cell_density = 12.f;             // nuclei per (100 um)^2
    float overlap_fraction = 0.15f;        // allowed overlap of radii sums
    float stain_jitter_lab = 2.0f;         // per-nucleus colour sigma
    float sensor_noise_sigma = 2.0f;       // additive RGB noise, 8-bit units
    float artifact_rate = 0.f;             // chance of one artifact per image
    float microns_per_pixel = 0.5f;
};

struct NucleusTruth {
    float x = 0.f, y = 0.f;  // centre, pixels
    Ki67Class cls = Ki67Class::Neg;
    float r_major_px = 0.f, r_minor_px = 0.f;
    float angle_rad = 0.f;
};

struct SynthImage {
    RgbImage image;
    CentroidSet truth;
    PiScore true_pi;
    std::vector<NucleusTruth> nuclei;
    double nuclei_coverage = 0.0;  // fraction of pixels under some nucleus
};

// Seeded generator: ellipse nuclei placed by dart throwing (centres at least
// (1 - overlap_fraction) * (r_i + r_j) apart, fully inside the image), an
// exact round(target_pi/100 * n) of them positive, anti-aliased rendering,
// optional artifact overlay (blur, tissue fold or dust), then sensor noise.
// Identical (params, target_pi, seed, size) always produce the identical
// image; every stochastic choice draws from a named substream of the seed.
// Throws PlacementOverflowError after 1000 * n failed placement attempts.
SynthImage generate(const DomainParams& params, double target_pi, std::uint64_t seed, int width,
                    int height);

SynthImage gen_patch(const DomainParams& params, double target_pi, std::uint64_t seed,
                     int size = 256);
SynthImage gen_tma(const DomainParams& params, double target_pi, std::uint64_t seed,
                   int size = 2000);

// Derived domain: each stain channel moves by 4.8..8 Lab units per unit of
// severity (random sign), the background and tissue wash tint, sensor noise
// grows by up to 4 * severity, and the radius scale moves by up to 20% *
// severity. severity 0 returns the input unchanged.
DomainParams shift_domain(const DomainParams& params, double severity, std::uint64_t seed);

// The standard evaluation pair: a fixed source domain and its severity-0.6
// shift under a pinned seed.
inline constexpr std::uint64_t kTargetShiftSeed = 20230816;
DomainParams source_preset();
DomainParams target_preset();

}  // namespace ki67::synth
