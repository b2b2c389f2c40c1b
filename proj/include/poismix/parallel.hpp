// Minimal work-sharing helper for embarrassingly parallel loops.
//
// Every parallel loop in this library assigns each item an independent RNG
// stream keyed by the item index, so results are identical no matter how many
// threads run or how work is scheduled.  parallel_for only provides the
// scheduling; determinism comes from that per-item keying.
#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <utility>
#include <vector>

namespace poismix {

// Resolves a requested thread count: n <= 0 means "use the hardware count",
// anything else is taken literally.  Always returns at least 1.
inline unsigned resolve_threads(int requested) {
  if (requested > 0) return static_cast<unsigned>(requested);
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

// Runs fn(i) for i in [0, count) across up to n_threads threads using static
// chunking.  fn must be safe to call concurrently for distinct i (typically it
// writes only to slot i of a preallocated output).  The first exception thrown
// by any worker is rethrown on the calling thread after all workers join.
template <class Fn>
void parallel_for(std::size_t count, unsigned n_threads, Fn&& fn) {
  if (count == 0) return;
  const unsigned workers =
      static_cast<unsigned>(std::min<std::size_t>(std::max(1u, n_threads), count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }

  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned t = 0; t < workers; ++t) {
    const std::size_t begin = count * t / workers;
    const std::size_t end = count * (t + 1) / workers;
    pool.emplace_back([&, begin, end] {
      try {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        const std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace poismix
