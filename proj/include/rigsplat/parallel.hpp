#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace rigsplat {

// Runs fn(i) for i in [0, count) across `workers` threads. Work is handed out
// as single indices from a shared counter; every fn(i) must write only to
// state owned by index i, so results are identical for any worker count.
inline void parallel_for(std::int64_t count, int workers,
                         const std::function<void(std::int64_t)>& fn) {
    if (count <= 0) return;
    if (workers <= 1 || count == 1) {
        for (std::int64_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::int64_t> next{0};
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    auto worker = [&] {
        while (true) {
            std::int64_t i = next.fetch_add(1, std::memory_order_relaxed);
            if (i >= count || failed.load(std::memory_order_relaxed)) return;
            try {
                fn(i);
            } catch (...) {
                if (!failed.exchange(true)) error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> threads;
    int n = std::min<std::int64_t>(workers, count);
    threads.reserve(n);
    for (int t = 0; t < n; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (failed) std::rethrow_exception(error);
}

}  // namespace rigsplat
