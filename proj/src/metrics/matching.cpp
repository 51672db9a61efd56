#include "ki67/metrics/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

namespace ki67::metrics {

namespace {

constexpr double kBigM = 1e9;  // cost of leaving a slot unmatched

// Union-find.
struct Dsu {
    std::vector<int> parent;
    explicit Dsu(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    void unite(int a, int b) { parent[find(a)] = find(b); }
};

struct ClassPoints {
    std::vector<int> pred;  // indices into the original sets
    std::vector<int> gt;
};

}  // namespace

std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
    // Jonker-Volgenant style shortest augmenting path, O(n^3).
    const int n = static_cast<int>(cost.size());
    if (n == 0) return {};
    for (const auto& row : cost)
        if (static_cast<int>(row.size()) != n) throw Error("hungarian: matrix must be square");

    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);  // p[j] = row assigned to column j (1-based)
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> perm(n, -1);
    for (int j = 1; j <= n; ++j)
        if (p[j] > 0) perm[p[j] - 1] = j - 1;
    return perm;
}

MatchResult match_centroids(const CentroidSet& pred, const CentroidSet& gt,
                            const MatchConfig& cfg) {
    if (std::fabs(pred.microns_per_pixel - gt.microns_per_pixel) > 1e-9f)
        throw CalibrationMismatchError(
            "match_centroids: sets disagree on microns_per_pixel (" +
            std::to_string(pred.microns_per_pixel) + " vs " + std::to_string(gt.microns_per_pixel) +
            ")");
    if (cfg.radius_um <= 0) throw Error("match_centroids: radius must be positive");
    const double mpp = pred.microns_per_pixel;
    const double radius_px = cfg.radius_um / mpp;

    MatchResult res;
    for (const Ki67Class cls : {Ki67Class::Neg, Ki67Class::Pos}) {
        ClassPoints cp;
        for (int i = 0; i < static_cast<int>(pred.points.size()); ++i)
            if (pred.points[i].cls == cls) cp.pred.push_back(i);
        for (int i = 0; i < static_cast<int>(gt.points.size()); ++i)
            if (gt.points[i].cls == cls) cp.gt.push_back(i);
        const int np = static_cast<int>(cp.pred.size()), ng = static_cast<int>(cp.gt.size());
        res.fp += np;  // matched pairs are subtracted below
        res.fn += ng;
        if (np == 0 || ng == 0) continue;

        // Candidate pairs via a uniform grid (cell = radius), then connected
        // components over pred+gt nodes joined by candidate edges.
        const double cell = radius_px;
        auto key = [&](float x, float y) {
            const long gx = static_cast<long>(std::floor(x / cell));
            const long gy = static_cast<long>(std::floor(y / cell));
            return (static_cast<unsigned long long>(gx) << 32) ^
                   static_cast<unsigned long long>(static_cast<unsigned long>(gy));
        };
        std::unordered_map<unsigned long long, std::vector<int>> grid;  // gt locals
        for (int j = 0; j < ng; ++j) {
            const auto& g = gt.points[cp.gt[j]];
            grid[key(g.x, g.y)].push_back(j);
        }
        Dsu dsu(np + ng);
        std::vector<std::vector<std::pair<int, double>>> edges(np);  // pred local -> (gt local, dist_um)
        for (int i = 0; i < np; ++i) {
            const auto& pp = pred.points[cp.pred[i]];
            const long gx0 = static_cast<long>(std::floor(pp.x / cell));
            const long gy0 = static_cast<long>(std::floor(pp.y / cell));
            for (long gy = gy0 - 1; gy <= gy0 + 1; ++gy)
                for (long gx = gx0 - 1; gx <= gx0 + 1; ++gx) {
                    const auto it = grid.find((static_cast<unsigned long long>(gx) << 32) ^
                                              static_cast<unsigned long long>(
                                                  static_cast<unsigned long>(gy)));
                    if (it == grid.end()) continue;
                    for (const int j : it->second) {
                        const auto& gg = gt.points[cp.gt[j]];
                        const double dx = (pp.x - gg.x) * mpp, dy = (pp.y - gg.y) * mpp;
                        const double d = std::sqrt(dx * dx + dy * dy);
                        if (d < cfg.radius_um) {
                            edges[i].emplace_back(j, d);
                            dsu.unite(i, np + j);
                        }
                    }
                }
        }

        // Group nodes by component.
        std::unordered_map<int, ClassPoints> comps;  // root -> local indices
        for (int i = 0; i < np; ++i)
            if (!edges[i].empty()) comps[dsu.find(i)].pred.push_back(i);
        for (int j = 0; j < ng; ++j) {
            const int root = dsu.find(np + j);
            const auto it = comps.find(root);
            if (it != comps.end()) it->second.gt.push_back(j);
        }

        std::vector<int> roots;
        roots.reserve(comps.size());
        for (const auto& [root, c] : comps) roots.push_back(root);
        std::sort(roots.begin(), roots.end());

        for (const int root : roots) {
            const auto& c = comps[root];
            const int cn = static_cast<int>(std::max(c.pred.size(), c.gt.size()));
            std::vector<std::vector<double>> cost(cn, std::vector<double>(cn, kBigM));
            for (std::size_t a = 0; a < c.pred.size(); ++a) {
                std::unordered_map<int, double> row;
                for (const auto& [j, d] : edges[c.pred[a]]) row[j] = d;
                for (std::size_t b = 0; b < c.gt.size(); ++b) {
                    const auto it = row.find(c.gt[b]);
                    if (it != row.end()) cost[a][b] = it->second;
                }
            }
            const auto perm = hungarian(cost);
            for (std::size_t a = 0; a < c.pred.size(); ++a) {
                const int b = perm[a];
                if (b < 0 || b >= static_cast<int>(c.gt.size())) continue;
                if (cost[a][b] >= kBigM) continue;  // left unmatched on purpose
                res.pairs.push_back({cp.pred[c.pred[a]], cp.gt[c.gt[b]], cost[a][b]});
                ++res.tp;
                --res.fp;
                --res.fn;
            }
        }
    }
    std::sort(res.pairs.begin(), res.pairs.end(), [](const MatchedPair& a, const MatchedPair& b) {
        return a.pred_index < b.pred_index;
    });
    return res;
}

F1Score f1_score(const MatchResult& m) {
    if (m.tp + m.fp + m.fn == 0)
        throw NoCellsError("f1_score: no predictions and no ground truth");
    F1Score s;
    s.precision = m.tp + m.fp > 0 ? static_cast<double>(m.tp) / (m.tp + m.fp) : 0.0;
    s.recall = m.tp + m.fn > 0 ? static_cast<double>(m.tp) / (m.tp + m.fn) : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

}  // namespace ki67::metrics
