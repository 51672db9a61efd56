#include "ki67/core/types.hpp"

#include <cmath>

namespace ki67 {

PiScore compute_pi(long pos_count, long neg_count) {
    if (pos_count < 0 || neg_count < 0) throw Error("compute_pi: negative cell count");
    const long total = pos_count + neg_count;
    if (total == 0) throw ZeroCellsError("compute_pi: no cells (pos + neg == 0)");
    PiScore s;
    s.pos_count = pos_count;
    s.neg_count = neg_count;
    s.value = 100.0 * static_cast<double>(pos_count) / static_cast<double>(total);
    return s;
}

double delta_pi(const PiScore& a, const PiScore& b) { return std::fabs(a.value - b.value); }

}  // namespace ki67
