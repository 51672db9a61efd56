#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "ki67/core/rng.hpp"
#include "ki67/labels/dataset.hpp"
#include "ki67/labels/heatmap.hpp"
#include "ki67/synth/generator.hpp"

using namespace ki67;
using labels::DecodeConfig;
using labels::Heatmap;

namespace {

std::filesystem::path tmp_dir(const char* leaf) {
    auto p = std::filesystem::temp_directory_path() / "ki67_test_labels" / leaf;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

CentroidSet random_set(int w, int h, int n, float min_sep, Rng& rng) {
    CentroidSet set;
    set.width = w;
    set.height = h;
    int guard = 0;
    while (static_cast<int>(set.points.size()) < n && ++guard < 100000) {
        Centroid c;
        c.x = static_cast<float>(rng.uniform(2.0, w - 2.0));
        c.y = static_cast<float>(rng.uniform(2.0, h - 2.0));
        c.cls = rng.below(2) ? Ki67Class::Pos : Ki67Class::Neg;
        bool ok = true;
        for (const auto& p : set.points) {
            const float dx = p.x - c.x, dy = p.y - c.y;
            if (dx * dx + dy * dy < min_sep * min_sep) ok = false;
        }
        if (ok) set.points.push_back(c);
    }
    return set;
}

}  // namespace

TEST_CASE("heatmap puts a full-strength peak at the pixel nearest each centroid") {
    CentroidSet set;
    set.width = 32;
    set.height = 32;
    set.points = {{10.3f, 20.7f, Ki67Class::Pos}};
    const Heatmap hm = labels::centroids_to_heatmap(set, 2.f);
    REQUIRE(hm.width == 32);
    CHECK(hm.pos[static_cast<std::size_t>(20) * 32 + 10] == 1.f);
    // The other channel stays empty.
    for (auto v : hm.neg) CHECK(v == 0.f);
    // Values decay with distance and vanish beyond 3 sigma.
    const float at2 = hm.pos[static_cast<std::size_t>(20) * 32 + 12];
    const float at4 = hm.pos[static_cast<std::size_t>(20) * 32 + 14];
    CHECK(at2 > at4);
    CHECK(at4 > 0.f);
    CHECK(hm.pos[static_cast<std::size_t>(20) * 32 + 18] == 0.f);  // ~7.7 px > 3 sigma
    for (auto v : hm.pos) {
        CHECK(v >= 0.f);
        CHECK(v <= 1.f);
    }
}

TEST_CASE("heatmap combines overlapping bumps by max") {
    CentroidSet one;
    one.width = one.height = 32;
    one.points = {{12.f, 16.f, Ki67Class::Neg}};
    CentroidSet two = one;
    two.points.push_back({18.f, 16.f, Ki67Class::Neg});

    const Heatmap a = labels::centroids_to_heatmap(one, 2.f);
    const Heatmap b = labels::centroids_to_heatmap(two, 2.f);
    for (std::size_t i = 0; i < a.pixel_count(); ++i) {
        CHECK(b.neg[i] >= a.neg[i]);  // adding a bump never lowers values
        CHECK(b.neg[i] <= 1.f);
    }
    // Both kept their exact-1 peaks.
    CHECK(b.neg[static_cast<std::size_t>(16) * 32 + 12] == 1.f);
    CHECK(b.neg[static_cast<std::size_t>(16) * 32 + 18] == 1.f);
}

TEST_CASE("heatmap round-trip recovers centroids within a pixel") {
    Rng rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        const auto set = random_set(64, 64, 8, 9.f, rng);  // > 4 sigma apart
        const Heatmap hm = labels::centroids_to_heatmap(set, 2.f);
        const CentroidSet back = labels::heatmap_to_centroids(hm, DecodeConfig{}, 0.5f);
        REQUIRE(back.points.size() == set.points.size());
        for (const auto& p : set.points) {
            bool found = false;
            for (const auto& q : back.points)
                if (q.cls == p.cls && std::fabs(q.x - p.x) <= 1.f && std::fabs(q.y - p.y) <= 1.f)
                    found = true;
            CHECK(found);
        }
    }
}

TEST_CASE("decode suppresses peaks closer than the minimum separation") {
    CentroidSet set;
    set.width = set.height = 32;
    set.points = {{14.f, 16.f, Ki67Class::Pos}, {17.f, 16.f, Ki67Class::Pos}};
    const Heatmap hm = labels::centroids_to_heatmap(set, 2.f);
    DecodeConfig cfg;  // min separation 6 px
    const CentroidSet back = labels::heatmap_to_centroids(hm, cfg);
    CHECK(back.points.size() == 1);

    DecodeConfig loose;
    loose.min_separation_px = 2.f;
    CHECK(labels::heatmap_to_centroids(hm, loose).points.size() == 2);
}

TEST_CASE("decode ignores sub-threshold responses") {
    Heatmap hm(16, 16);
    hm.pos[static_cast<std::size_t>(8) * 16 + 8] = 0.29f;
    hm.neg[static_cast<std::size_t>(4) * 16 + 4] = 0.31f;
    const CentroidSet back = labels::heatmap_to_centroids(hm, DecodeConfig{});
    REQUIRE(back.points.size() == 1);
    CHECK(back.points[0].cls == Ki67Class::Neg);
}

TEST_CASE("tile_image drops partial border tiles") {
    RgbImage img(100, 70);
    const auto tiles = labels::tile_image(img, 32, 3);
    CHECK(tiles.size() == 6);  // 3 x 2
    for (const auto& t : tiles) {
        CHECK(t.image.width == 32);
        CHECK(t.image.height == 32);
        CHECK(t.origin_x % 32 == 0);
        CHECK(t.origin_y % 32 == 0);
        CHECK(t.origin_x + 32 <= 100);
        CHECK(t.origin_y + 32 <= 70);
        CHECK(t.source_index == 3);
    }
    CHECK_THROWS_AS(labels::tile_image(img, 128), Error);
}

TEST_CASE("tissue_fraction") {
    std::vector<std::uint8_t> mask = {1, 0, 1, 1};
    CHECK(labels::tissue_fraction(mask) == doctest::Approx(0.75));
}

TEST_CASE("dataset save/load round-trip") {
    Rng rng(55);
    std::vector<labels::LabeledPatch> items;
    for (int i = 0; i < 3; ++i) {
        labels::LabeledPatch lp;
        lp.image = RgbImage(40, 40);
        for (auto& v : lp.image.data) v = static_cast<std::uint8_t>(rng.below(256));
        CentroidSet set;
        set.width = set.height = 40;
        set.points = {{10.f + i, 12.f, Ki67Class::Pos}, {30.f, 25.f + i, Ki67Class::Neg}};
        lp.label = labels::centroids_to_heatmap(set, 2.f);
        items.push_back(std::move(lp));
    }
    const auto dir = tmp_dir("roundtrip").string();
    labels::save_dataset(dir, items, "gs", 7, 2.f, 0.5f);
    const auto back = labels::load_dataset(dir);
    REQUIRE(back.size() == items.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].image.data == items[i].image.data);
        REQUIRE(back[i].label.pixel_count() == items[i].label.pixel_count());
        float worst = 0.f;
        for (std::size_t j = 0; j < items[i].label.pixel_count(); ++j) {
            worst = std::max(worst, std::fabs(back[i].label.pos[j] - items[i].label.pos[j]));
            worst = std::max(worst, std::fabs(back[i].label.neg[j] - items[i].label.neg[j]));
        }
        CHECK(worst <= 1.f / 65535.f);  // 16-bit quantization
    }
}

TEST_CASE("silver-standard dataset keeps smaller budgets as prefixes") {
    synth::DomainParams dom = synth::target_preset();
    std::vector<RgbImage> images;
    for (int i = 0; i < 2; ++i) images.push_back(synth::gen_tma(dom, 20.0, 600 + i, 384).image);

    ihcch::IhcchConfig icfg;
    labels::SsDatasetSpec spec;
    spec.patch_size = 128;
    spec.min_tissue_fraction = 0.5;
    spec.seed = 9;
    spec.patch_budget = 4;
    const auto small = labels::build_ss_dataset(images, icfg, spec);
    spec.patch_budget = 8;
    const auto large = labels::build_ss_dataset(images, icfg, spec);
    REQUIRE(small.size() == 4);
    REQUIRE(large.size() == 8);
    for (std::size_t i = 0; i < small.size(); ++i) {
        CHECK(small[i].source_index == large[i].source_index);
        CHECK(small[i].origin_x == large[i].origin_x);
        CHECK(small[i].origin_y == large[i].origin_y);
        CHECK(small[i].image.data == large[i].image.data);
    }
    // Labels are the unsupervised detector's output rendered as heatmaps: the
    // positive/negative channels cannot both be empty everywhere.
    bool any_signal = false;
    for (const auto& lp : small)
        for (std::size_t j = 0; j < lp.label.pixel_count(); ++j)
            if (lp.label.pos[j] > 0.f || lp.label.neg[j] > 0.f) any_signal = true;
    CHECK(any_signal);

    spec.patch_budget = 100000;
    CHECK_THROWS_AS(labels::build_ss_dataset(images, icfg, spec),
                    labels::InsufficientPatchesError);
}
