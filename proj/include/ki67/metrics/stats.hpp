#pragma once

#include <vector>

#include "ki67/core/types.hpp"

namespace ki67::metrics {

struct DegenerateGroupsError : Error {
    explicit DegenerateGroupsError(const std::string& what) : Error(what) {}
};

struct AnovaResult {
    double f = 0.0;
    double p = 0.0;
    double df_between = 0.0;
    double df_within = 0.0;
    double ss_between = 0.0;
    double ss_within = 0.0;
};

// One-way fixed-effects ANOVA. Needs >= 2 groups with >= 2 values each;
// throws DegenerateGroupsError when every group has zero within-group
// variance (the F statistic is undefined there).
AnovaResult one_way_anova(const std::vector<std::vector<double>>& groups);

// Survival function of the F distribution, P(F_{d1,d2} > x), via the
// regularized incomplete beta function.
double f_survival(double x, double d1, double d2);

// Regularized incomplete beta I_x(a, b) (continued fraction evaluation).
double incomplete_beta(double a, double b, double x);

// One-sided paired comparison: p-value for "mean(a - b) > 0" from the paired
// t statistic, computed through the F survival function (t^2 ~ F(1, n-1)).
// a and b must have equal length n >= 2. Zero-variance differences resolve to
// p = 0 (all positive), p = 1 (otherwise).
double paired_one_sided_p(const std::vector<double>& a, const std::vector<double>& b);

// Sample standard deviation (n-1 denominator) of a per-fold metric; the
// fold-to-fold reproducibility number. Needs >= 2 values.
double fold_reproducibility(const std::vector<double>& per_fold_values);

double mean(const std::vector<double>& v);
double sample_stddev(const std::vector<double>& v);

}  // namespace ki67::metrics
