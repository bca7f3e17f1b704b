#pragma once

#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace ditair {

// =============================================================================
// Deterministic parallel loops
// =============================================================================
//
// parallel_for splits [0, n) into contiguous ranges, one per worker. It is
// only used where each index owns a disjoint slice of the output, so the
// result is bit-identical to the serial loop for any worker count. Reductions
// are never parallelized.

inline int thread_count() {
    static int n = [] {
        if (const char* env = std::getenv("DITAIR_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw ? static_cast<int>(hw) : 1;
    }();
    return n;
}

template <typename F>
void parallel_for(int64_t n, F&& fn, int64_t min_per_thread = 64) {
    int workers = thread_count();
    if (workers <= 1 || n < 2 * min_per_thread) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    int64_t max_workers = n / min_per_thread;
    if (max_workers < workers) workers = static_cast<int>(max_workers);
    if (workers <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        int64_t lo = w * chunk;
        int64_t hi = lo + chunk < n ? lo + chunk : n;
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace ditair
