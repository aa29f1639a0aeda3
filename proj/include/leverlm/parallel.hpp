#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace leverlm {

// Runs body(i) for i in [0, n) on up to `threads` workers with static
// striping. Results must be written to per-index slots by the caller, which
// keeps output independent of the thread count. The first exception (lowest
// index) is rethrown after all workers join.
template <typename Body>
void parallel_for(std::size_t n, std::size_t threads, Body&& body) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            body(i);
        }
        return;
    }
    std::mutex mu;
    std::exception_ptr first_error;
    std::size_t first_index = n;
    {
        std::vector<std::jthread> workers;
        workers.reserve(threads);
        for (std::size_t w = 0; w < threads; ++w) {
            workers.emplace_back([&, w] {
                for (std::size_t i = w; i < n; i += threads) {
                    try {
                        body(i);
                    } catch (...) {
                        std::lock_guard lock(mu);
                        if (i < first_index) {
                            first_index = i;
                            first_error = std::current_exception();
                        }
                        return;
                    }
                }
            });
        }
    }
    if (first_error) {
        std::rethrow_exception(first_error);
    }
}

inline std::size_t default_thread_count() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

}  // namespace leverlm
