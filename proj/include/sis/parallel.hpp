#pragma once

#include <cstdlib>
#include <thread>
#include <vector>

namespace sis {

// Worker count from SIS_THREADS (0 = single-threaded), else hardware default.
inline int worker_count() {
    if (const char* env = std::getenv("SIS_THREADS")) {
        int n = std::atoi(env);
        return n <= 0 ? 1 : n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw > 8 ? 8 : hw);
}

// Block-partitioned parallel loop. Each index is processed by exactly one
// thread with a fixed inner order, so results do not depend on thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    int workers = worker_count();
    if (workers <= 1 || n < 64) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::size_t block = (n + workers - 1) / workers;
    std::vector<std::thread> threads;
    for (int t = 0; t < workers; ++t) {
        std::size_t lo = std::size_t(t) * block;
        if (lo >= n) break;
        std::size_t hi = std::min(n, lo + block);
        threads.emplace_back([lo, hi, &fn] {
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : threads) th.join();
}

} // namespace sis
