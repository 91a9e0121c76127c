#pragma once

#include <cstddef>
#include <algorithm>
#include <exception>
#include <functional>
#include <optional>
#include <vector>

namespace nfk {

/// Worker count and example-block size for batched kernels. Results never
/// depend on `threads`: blocks are fixed-size and partials combine in block order.
struct Parallelism {
    std::size_t threads = 0;  // 0: NFK_THREADS, else hardware concurrency
    std::size_t block = 256;
};

/// Resolves a requested worker count: explicit value, then NFK_THREADS, then
/// std::thread::hardware_concurrency().
std::size_t resolve_threads(std::size_t requested);

/// Runs fn(0..n_tasks-1) on up to `threads` workers. Rethrows the first
/// exception raised by a task after all workers stop.
void parallel_for(std::size_t n_tasks, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// Computes per-task partials concurrently and folds them strictly in task
/// order: combine(acc, partial_0), combine(acc, partial_1), ...
template <class Partial, class Compute, class Combine>
void ordered_reduce(std::size_t n_tasks, std::size_t threads, Compute&& compute, Combine&& combine) {
    const std::size_t wave = threads == 0 ? 1 : threads;
    std::vector<std::optional<Partial>> partials(wave);
    for (std::size_t start = 0; start < n_tasks; start += wave) {
        const std::size_t count = std::min(wave, n_tasks - start);
        parallel_for(count, threads, [&](std::size_t i) { partials[i].emplace(compute(start + i)); });
        for (std::size_t i = 0; i < count; ++i) {
            combine(std::move(*partials[i]));
            partials[i].reset();
        }
    }
}

}  // namespace nfk
