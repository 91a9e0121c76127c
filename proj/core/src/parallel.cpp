#include "nfk/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <mutex>
#include <string>
#include <thread>

namespace nfk {

std::size_t resolve_threads(std::size_t requested) {
    if (requested > 0) {
        return requested;
    }
    if (const char* env = std::getenv("NFK_THREADS"); env != nullptr && *env != '\0') {
        try {
            const long v = std::stol(env);
            if (v > 0) {
                return static_cast<std::size_t>(v);
            }
        } catch (const std::exception&) {
        }
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n_tasks, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    if (n_tasks == 0) {
        return;
    }
    const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), n_tasks);
    if (workers == 1) {
        for (std::size_t i = 0; i < n_tasks; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= n_tasks) {
                        return;
                    }
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(failure_mutex);
                        if (!failure) {
                            failure = std::current_exception();
                        }
                        next.store(n_tasks);
                    }
                }
            });
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

}  // namespace nfk
