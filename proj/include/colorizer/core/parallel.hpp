#ifndef COLORIZER_CORE_PARALLEL_HPP
#define COLORIZER_CORE_PARALLEL_HPP

#include <Eigen/Core>

#include <algorithm>
#include <thread>
#include <vector>

namespace colorizer {

/// Run fn(i) for i in [0,n). Work items must write to disjoint memory; the
/// partition is a fixed contiguous split so results never depend on
/// scheduling. Falls back to a serial loop for small n.
template <class Fn>
void parallel_for(Eigen::Index n, Fn&& fn) {
    unsigned hw = std::thread::hardware_concurrency();
    Eigen::Index workers = std::min<Eigen::Index>(n, hw == 0 ? 1 : static_cast<Eigen::Index>(hw));
    if (workers <= 1 || n <= 1) {
        for (Eigen::Index i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers - 1));
    Eigen::Index chunk = (n + workers - 1) / workers;
    for (Eigen::Index w = 1; w < workers; ++w) {
        Eigen::Index lo = w * chunk;
        Eigen::Index hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (Eigen::Index i = lo; i < hi; ++i) fn(i);
        });
    }
    for (Eigen::Index i = 0; i < std::min(chunk, n); ++i) fn(i);
    for (auto& t : pool) t.join();
}

}  // namespace colorizer

#endif
