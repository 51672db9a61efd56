#include "ki67/metrics/stats.hpp"

#include <cmath>
#include <limits>

namespace ki67::metrics {

double mean(const std::vector<double>& v) {
    if (v.empty()) throw Error("mean: empty vector");
    double s = 0.0;
    for (const double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double sample_stddev(const std::vector<double>& v) {
    if (v.size() < 2) throw Error("sample_stddev: need at least 2 values");
    const double m = mean(v);
    double s = 0.0;
    for (const double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

namespace {

// Lanczos approximation, good to ~15 significant digits.
double log_gamma(double x) {
    static const double c[9] = {0.99999999999980993,  676.5203681218851,   -1259.1392167224028,
                                771.32342877765313,   -176.61502916214059, 12.507343278686905,
                                -0.13857109526572012, 9.9843695780195716e-6,
                                1.5056327351493116e-7};
    if (x < 0.5) {
        // reflection
        return std::log(3.14159265358979323846 / std::sin(3.14159265358979323846 * x)) -
               log_gamma(1.0 - x);
    }
    x -= 1.0;
    double a = c[0];
    const double t = x + 7.5;
    for (int i = 1; i < 9; ++i) a += c[i] / (x + i);
    return 0.5 * std::log(2.0 * 3.14159265358979323846) + (x + 0.5) * std::log(t) - t +
           std::log(a);
}

// Continued fraction for the incomplete beta (modified Lentz).
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
    if (a <= 0 || b <= 0) throw Error("incomplete_beta: a and b must be positive");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front =
        log_gamma(a + b) - log_gamma(a) - log_gamma(b) + a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - std::exp(log_gamma(a + b) - log_gamma(b) - log_gamma(a) + b * std::log(1.0 - x) +
                          a * std::log(x)) *
                     betacf(b, a, 1.0 - x) / b;
}

double f_survival(double x, double d1, double d2) {
    if (d1 <= 0 || d2 <= 0) throw Error("f_survival: degrees of freedom must be positive");
    if (x <= 0.0) return 1.0;
    if (std::isinf(x)) return 0.0;
    // P(F > x) = I_{d2/(d2 + d1 x)}(d2/2, d1/2)
    return incomplete_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * x));
}

AnovaResult one_way_anova(const std::vector<std::vector<double>>& groups) {
    if (groups.size() < 2) throw Error("one_way_anova: need at least 2 groups");
    long n_total = 0;
    double grand_sum = 0.0;
    for (const auto& g : groups) {
        if (g.size() < 2) throw Error("one_way_anova: every group needs at least 2 values");
        n_total += static_cast<long>(g.size());
        for (const double x : g) grand_sum += x;
    }
    const double grand_mean = grand_sum / static_cast<double>(n_total);

    AnovaResult r;
    for (const auto& g : groups) {
        double gm = 0.0;
        for (const double x : g) gm += x;
        gm /= static_cast<double>(g.size());
        r.ss_between += static_cast<double>(g.size()) * (gm - grand_mean) * (gm - grand_mean);
        for (const double x : g) r.ss_within += (x - gm) * (x - gm);
    }
    r.df_between = static_cast<double>(groups.size()) - 1.0;
    r.df_within = static_cast<double>(n_total) - static_cast<double>(groups.size());
    if (r.ss_within == 0.0)
        throw DegenerateGroupsError("one_way_anova: zero within-group variance in every group");
    r.f = (r.ss_between / r.df_between) / (r.ss_within / r.df_within);
    r.p = f_survival(r.f, r.df_between, r.df_within);
    return r;
}

double paired_one_sided_p(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw Error("paired_one_sided_p: length mismatch");
    const long n = static_cast<long>(a.size());
    if (n < 2) throw Error("paired_one_sided_p: need at least 2 pairs");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const double dm = mean(d);
    const double sd = sample_stddev(d);
    if (sd == 0.0) return dm > 0.0 ? 0.0 : 1.0;
    const double t = dm / (sd / std::sqrt(static_cast<double>(n)));
    const double p_two = f_survival(t * t, 1.0, static_cast<double>(n - 1));
    return t > 0.0 ? 0.5 * p_two : 1.0 - 0.5 * p_two;
}

double fold_reproducibility(const std::vector<double>& per_fold_values) {
    if (per_fold_values.size() < 2)
        throw Error("fold_reproducibility: need at least 2 folds");
    return sample_stddev(per_fold_values);
}

}  // namespace ki67::metrics
