#pragma once

namespace ki67::kernels {

// Execution policy for the heavy kernels. Every parallel kernel in this
// project assigns each output element to exactly one thread and accumulates
// in a fixed serial order inside that element, so Serial and Parallel produce
// bit-identical results for any thread count. Serial is kept as the plain
// reference implementation the tests compare against.
enum class Exec { Serial, Parallel };

template <typename F>
void parallel_for(Exec exec, int n, F&& body) {
    if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i) body(i);
    } else {
        for (int i = 0; i < n; ++i) body(i);
    }
}

}  // namespace ki67::kernels
