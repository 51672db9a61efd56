#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "ki67/core/types.hpp"
#include "ki67/kernels/parallel.hpp"

namespace ki67::embed {

struct DegenerateInputError : Error {
    explicit DegenerateInputError(const std::string& what, std::vector<int> indices = {})
        : Error(what), point_indices(std::move(indices)) {}
    std::vector<int> point_indices;  // points whose sigma search failed
};

struct TsneConfig {
    double perplexity = 15.0;
    int iterations = 1000;
    double learning_rate = 100.0;
    double early_exaggeration = 4.0;
    int exaggeration_iters = 100;
    double momentum_initial = 0.5;
    double momentum_final = 0.8;
    int momentum_switch_iter = 250;
    std::uint64_t seed = 1;

    void validate(int n) const;  // iterations >= 250, perplexity < (n-1)/3
};

// Symmetrized, normalized pairwise affinities of X (n rows, dim columns).
// Per-point sigma comes from a bisection on the conditional perplexity
// (|perp - target| <= 1e-4, at most 64 iterations); points whose search fails
// are reported in DegenerateInputError.
std::vector<double> pairwise_affinities(const std::vector<std::vector<double>>& x,
                                        double perplexity,
                                        kernels::Exec exec = kernels::Exec::Parallel);

struct TsneResult {
    std::vector<std::array<double, 2>> y;
    std::vector<double> kl_curve;  // per iteration, against the un-exaggerated P
};

// Exact (O(n^2)) t-SNE: Student-t low-dimensional kernel, early exaggeration,
// two-phase momentum, per-iteration recentring. Deterministic in (x, cfg).
TsneResult tsne(const std::vector<std::vector<double>>& x, const TsneConfig& cfg = {},
                kernels::Exec exec = kernels::Exec::Parallel);

// Fraction of points with at least one point of the other domain among their
// k nearest embedding neighbours (all other points when fewer than k exist).
// tags[i] is the domain of point i; both domains must be present.
double domain_overlap_score(const std::vector<std::array<double, 2>>& y,
                            const std::vector<int>& tags, int k = 10);

// Mean silhouette coefficient over points, Euclidean distance, for integer
// cluster labels (every cluster needs >= 1 point; points in singleton
// clusters score 0).
double silhouette_score(const std::vector<std::array<double, 2>>& y,
                        const std::vector<int>& labels);

}  // namespace ki67::embed
