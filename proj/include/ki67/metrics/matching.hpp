#pragma once

#include <vector>

#include "ki67/core/types.hpp"

namespace ki67::metrics {

struct CalibrationMismatchError : Error {
    explicit CalibrationMismatchError(const std::string& what) : Error(what) {}
};
struct NoCellsError : Error {
    explicit NoCellsError(const std::string& what) : Error(what) {}
};

struct MatchConfig {
    double radius_um = 6.0;  // a prediction counts only within this distance
};

struct MatchedPair {
    int pred_index;
    int gt_index;
    double distance_um;
};

struct MatchResult {
    long tp = 0;
    long fp = 0;
    long fn = 0;
    std::vector<MatchedPair> pairs;  // indices into the original sets
};

// Optimal one-to-one assignment between predictions and ground truth, per
// class: among all matchings using only pairs closer than radius_um, the one
// with the maximum number of pairs, and among those the minimum total
// distance. Solved exactly with a Hungarian solver, decomposed over connected
// components of the "within radius" graph so large images stay fast.
// tp + fn == |gt| and tp + fp == |pred| always hold. Both sets must share the
// same pixel calibration.
MatchResult match_centroids(const CentroidSet& pred, const CentroidSet& gt,
                            const MatchConfig& cfg = {});

struct F1Score {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Precision/recall/F1 from counts; conventions: 0/0 rates are 0, F1 is 0 when
// precision + recall == 0. Throws NoCellsError when tp + fp + fn == 0.
F1Score f1_score(const MatchResult& m);

// Exact min-cost assignment of an n x n matrix (row i -> col perm[i]).
// Exposed for the tests' brute-force comparison.
std::vector<int> hungarian(const std::vector<std::vector<double>>& cost);

}  // namespace ki67::metrics
