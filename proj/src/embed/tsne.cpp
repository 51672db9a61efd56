#include "ki67/embed/tsne.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ki67/core/rng.hpp"

namespace ki67::embed {

void TsneConfig::validate(int n) const {
    if (iterations < 250) throw Error("tsne: iterations must be >= 250");
    if (perplexity <= 1.0) throw Error("tsne: perplexity must be > 1");
    if (3.0 * perplexity >= static_cast<double>(n - 1))
        throw Error("tsne: perplexity too large for " + std::to_string(n) + " points");
    if (learning_rate <= 0 || early_exaggeration < 1) throw Error("tsne: bad config");
}

namespace {

std::vector<double> squared_distances(const std::vector<std::vector<double>>& x) {
    const int n = static_cast<int>(x.size());
    const std::size_t dim = x.empty() ? 0 : x[0].size();
    for (const auto& row : x)
        if (row.size() != dim) throw Error("tsne: ragged input matrix");
    std::vector<double> d2(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                const double d = x[i][k] - x[j][k];
                s += d * d;
            }
            d2[static_cast<std::size_t>(i) * n + j] = s;
            d2[static_cast<std::size_t>(j) * n + i] = s;
        }
    return d2;
}

// Conditional row p_{j|i} for one beta; returns perplexity. row must have n
// slots; the diagonal entry stays 0.
double row_perplexity(const double* d2row, int n, int i, double beta, double* row) {
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        row[j] = j == i ? 0.0 : std::exp(-beta * d2row[j]);
        sum += row[j];
    }
    if (sum <= 0.0) return 0.0;
    // H = sum -p log p with p = row/sum, computed stably.
    double h = 0.0;
    for (int j = 0; j < n; ++j) {
        if (row[j] <= 0.0) continue;
        const double p = row[j] / sum;
        h -= p * std::log(p);
        row[j] = p;
    }
    return std::exp(h);
}

}  // namespace

std::vector<double> pairwise_affinities(const std::vector<std::vector<double>>& x,
                                        double perplexity, kernels::Exec exec) {
    const int n = static_cast<int>(x.size());
    if (3.0 * perplexity >= static_cast<double>(n - 1))
        throw Error("pairwise_affinities: perplexity too large for " + std::to_string(n) +
                    " points");
    const auto d2 = squared_distances(x);

    std::vector<double> cond(static_cast<std::size_t>(n) * n, 0.0);
    std::vector<std::uint8_t> failed(n, 0);
    kernels::parallel_for(exec, n, [&](int i) {
        double* row = cond.data() + static_cast<std::size_t>(i) * n;
        const double* d2row = d2.data() + static_cast<std::size_t>(i) * n;
        double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
        bool ok = false;
        for (int it = 0; it < 64; ++it) {
            const double perp = row_perplexity(d2row, n, i, beta, row);
            if (std::fabs(perp - perplexity) <= 1e-4) {
                ok = true;
                break;
            }
            if (perp > perplexity) {  // too flat -> sharpen
                lo = beta;
                beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        failed[i] = ok ? 0 : 1;
    });
    std::vector<int> bad;
    for (int i = 0; i < n; ++i)
        if (failed[i]) bad.push_back(i);
    if (!bad.empty())
        throw DegenerateInputError("pairwise_affinities: sigma search failed for " +
                                       std::to_string(bad.size()) + " points",
                                   bad);

    // Symmetrize: p_ij = (p_{j|i} + p_{i|j}) / 2n, then normalize exactly.
    std::vector<double> p(static_cast<std::size_t>(n) * n, 0.0);
    double total = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            const double v = (cond[static_cast<std::size_t>(i) * n + j] +
                              cond[static_cast<std::size_t>(j) * n + i]) /
                             (2.0 * n);
            p[static_cast<std::size_t>(i) * n + j] = v;
            total += v;
        }
    for (auto& v : p) v /= total;
    return p;
}

TsneResult tsne(const std::vector<std::vector<double>>& x, const TsneConfig& cfg,
                kernels::Exec exec) {
    const int n = static_cast<int>(x.size());
    cfg.validate(n);
    const auto p = pairwise_affinities(x, cfg.perplexity, exec);

    TsneResult res;
    res.y.assign(n, {0.0, 0.0});
    Rng rng(cfg.seed);
    for (auto& yi : res.y) {
        yi[0] = 1e-4 * rng.normal();
        yi[1] = 1e-4 * rng.normal();
    }

    std::vector<std::array<double, 2>> vel(n, {0.0, 0.0});
    std::vector<double> wq(static_cast<std::size_t>(n) * n, 0.0);  // 1/(1+d^2)
    std::vector<std::array<double, 2>> grad(n);

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const double exag = iter < cfg.exaggeration_iters ? cfg.early_exaggeration : 1.0;
        const double mom =
            iter < cfg.momentum_switch_iter ? cfg.momentum_initial : cfg.momentum_final;

        kernels::parallel_for(exec, n, [&](int i) {
            double* wrow = wq.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                if (j == i) {
                    wrow[j] = 0.0;
                    continue;
                }
                const double dx = res.y[i][0] - res.y[j][0];
                const double dy = res.y[i][1] - res.y[j][1];
                wrow[j] = 1.0 / (1.0 + dx * dx + dy * dy);
            }
        });
        double z = 0.0;
        for (const double w : wq) z += w;  // fixed order; includes zero diagonal

        kernels::parallel_for(exec, n, [&](int i) {
            const double* wrow = wq.data() + static_cast<std::size_t>(i) * n;
            const double* prow = p.data() + static_cast<std::size_t>(i) * n;
            double gx = 0.0, gy = 0.0;
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                const double pij = exag * prow[j];
                const double qij = wrow[j] / z;
                const double mult = (pij - qij) * wrow[j];
                gx += mult * (res.y[i][0] - res.y[j][0]);
                gy += mult * (res.y[i][1] - res.y[j][1]);
            }
            grad[i] = {4.0 * gx, 4.0 * gy};
        });

        double mx = 0.0, my = 0.0;
        for (int i = 0; i < n; ++i) {
            vel[i][0] = mom * vel[i][0] - cfg.learning_rate * grad[i][0];
            vel[i][1] = mom * vel[i][1] - cfg.learning_rate * grad[i][1];
            res.y[i][0] += vel[i][0];
            res.y[i][1] += vel[i][1];
            mx += res.y[i][0];
            my += res.y[i][1];
        }
        mx /= n;
        my /= n;
        for (auto& yi : res.y) {
            yi[0] -= mx;
            yi[1] -= my;
        }

        // KL divergence against the true (un-exaggerated) P.
        double kl = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k) {
            if (p[k] <= 0.0) continue;
            const double q = std::max(wq[k] / z, 1e-12);
            kl += p[k] * std::log(p[k] / q);
        }
        res.kl_curve.push_back(kl);
    }
    return res;
}

double domain_overlap_score(const std::vector<std::array<double, 2>>& y,
                            const std::vector<int>& tags, int k) {
    const int n = static_cast<int>(y.size());
    if (tags.size() != y.size()) throw Error("domain_overlap_score: tag count mismatch");
    if (n < 2) throw Error("domain_overlap_score: need at least 2 points");
    if (k < 1) throw Error("domain_overlap_score: k must be positive");
    k = std::min(k, n - 1);  // fewer points than neighbors asked for: use them all
    bool has[2] = {false, false};
    for (const int t : tags) {
        if (t != 0 && t != 1) throw Error("domain_overlap_score: tags must be 0 or 1");
        has[t] = true;
    }
    if (!has[0] || !has[1]) throw Error("domain_overlap_score: both domains must be present");

    long mixed = 0;
    std::vector<std::pair<double, int>> dist(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
            dist[j] = {dx * dx + dy * dy, j};
        }
        dist[i].first = std::numeric_limits<double>::infinity();  // exclude self
        std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
        for (int j = 0; j < k; ++j)
            if (tags[dist[j].second] != tags[i]) {
                ++mixed;
                break;
            }
    }
    return static_cast<double>(mixed) / static_cast<double>(n);
}

double silhouette_score(const std::vector<std::array<double, 2>>& y,
                        const std::vector<int>& labels) {
    const int n = static_cast<int>(y.size());
    if (labels.size() != y.size()) throw Error("silhouette_score: label count mismatch");
    if (n < 2) throw Error("silhouette_score: need at least 2 points");
    int max_label = 0;
    for (const int l : labels) {
        if (l < 0) throw Error("silhouette_score: labels must be non-negative");
        max_label = std::max(max_label, l);
    }
    const int nc = max_label + 1;
    std::vector<long> count(nc, 0);
    for (const int l : labels) ++count[l];
    int used = 0;
    for (const long c : count) used += c > 0;
    if (used < 2) throw Error("silhouette_score: need at least 2 clusters");

    double total = 0.0;
    std::vector<double> sum_to(nc);
    for (int i = 0; i < n; ++i) {
        std::fill(sum_to.begin(), sum_to.end(), 0.0);
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
            sum_to[labels[j]] += std::sqrt(dx * dx + dy * dy);
        }
        const int li = labels[i];
        if (count[li] <= 1) continue;  // singleton scores 0
        const double a = sum_to[li] / static_cast<double>(count[li] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (int c = 0; c < nc; ++c) {
            if (c == li || count[c] == 0) continue;
            b = std::min(b, sum_to[c] / static_cast<double>(count[c]));
        }
        if (std::max(a, b) > 0.0) total += (b - a) / std::max(a, b);
    }
    return total / static_cast<double>(n);
}

}  // namespace ki67::embed
