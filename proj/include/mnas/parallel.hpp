#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace mnas {

// Index-parallel loop. Each index is handled exactly once; callers that need
// deterministic results write into per-index slots and reduce sequentially
// afterwards, so the outcome is independent of thread scheduling.
inline void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
    if (n <= 0) {
        return;
    }
    if (workers <= 1 || n == 1) {
        for (int i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    int n_threads = std::min(workers, n);
    std::atomic<int> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (int t = 0; t < n_threads; ++t) {
        pool.emplace_back([&] {
            while (!failed.load(std::memory_order_relaxed)) {
                int i = next.fetch_add(1);
                if (i >= n) {
                    break;
                }
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) {
                        error = std::current_exception();
                    }
                    failed.store(true);
                }
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
    if (error) {
        std::rethrow_exception(error);
    }
}

}  // namespace mnas
