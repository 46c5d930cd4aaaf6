#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace tensor_ties {

/// Elements per work unit. Reductions combine per-chunk partials in chunk
/// order, so results depend on this constant but never on the thread count.
inline constexpr std::size_t kChunkElems = std::size_t{1} << 16;

inline std::size_t hardware_threads() noexcept
{
    const auto n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : n;
}

/// Runs fn(i) for every i in [0, count) on up to `threads` workers.
/// Work items are claimed dynamically; fn must only write state owned by item i.
/// The first exception thrown by any item is rethrown on the calling thread.
template <class Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn)
{
    if (count == 0) return;
    threads = std::clamp<std::size_t>(threads, 1, count);
    if (threads == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
            if (i >= count) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next.store(count, std::memory_order_relaxed);
            }
        }
    };

    {
        std::vector<std::jthread> pool;
        pool.reserve(threads - 1);
        for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
        worker();
    }
    if (failure) std::rethrow_exception(failure);
}

/// A contiguous element range of one tensor, the unit of parallel work.
struct Chunk {
    std::size_t tensor;
    std::size_t begin;
    std::size_t end;
};

/// Splits tensors of the given sizes into fixed-size chunks, in flat order.
inline std::vector<Chunk> make_chunks(const std::vector<std::size_t>& sizes)
{
    std::vector<Chunk> chunks;
    for (std::size_t t = 0; t < sizes.size(); ++t) {
        for (std::size_t b = 0; b < sizes[t]; b += kChunkElems) {
            chunks.push_back({t, b, std::min(sizes[t], b + kChunkElems)});
        }
    }
    return chunks;
}

} // namespace tensor_ties
