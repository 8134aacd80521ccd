#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace lscn {

/// Number of work chunks used for reductions. Fixed so that reduction order,
/// and therefore every floating-point result, does not depend on how many
/// threads run the chunks.
inline constexpr std::size_t kReductionChunks = 16;

inline std::size_t default_thread_count() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

struct ChunkRange {
  std::size_t index;
  std::size_t begin;
  std::size_t end;
};

inline std::vector<ChunkRange> make_chunks(std::size_t n, std::size_t n_chunks = kReductionChunks) {
  std::vector<ChunkRange> chunks;
  if (n == 0) return chunks;
  n_chunks = std::min(n, n_chunks);
  for (std::size_t c = 0; c < n_chunks; ++c) chunks.push_back({c, c * n / n_chunks, (c + 1) * n / n_chunks});
  return chunks;
}

/// Runs `fn(chunk)` for every chunk on up to `threads` workers. The first
/// exception thrown by any chunk is rethrown on the calling thread.
inline void run_chunks(const std::vector<ChunkRange>& chunks, std::size_t threads,
                       const std::function<void(const ChunkRange&)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, chunks.size()));
  if (threads == 1) {
    for (const auto& c : chunks) fn(c);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= chunks.size()) return;
      try {
        fn(chunks[i]);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  run_chunks(make_chunks(n, std::max<std::size_t>(kReductionChunks, threads * 4)), threads,
             [&](const ChunkRange& c) {
               for (std::size_t i = c.begin; i < c.end; ++i) fn(i);
             });
}

}  // namespace lscn
