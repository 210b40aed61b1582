#pragma once

#include "scvamp/types.hpp"

#include <algorithm>
#include <thread>
#include <vector>

namespace scvamp {

/// Static block partition of [0, n) over `threads` workers. Each index must
/// write only its own output slot; reductions over the results happen
/// afterwards in fixed index order, so the outcome is independent of the
/// thread count.
template <class Fn>
void parallel_for(Index n, int threads, Fn&& fn) {
  threads = std::max(1, threads);
  if (threads == 1 || n <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  const Index workers = std::min<Index>(threads, n);
  const Index chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (Index w = 0; w < workers; ++w) {
    const Index lo = w * chunk;
    const Index hi = std::min(n, lo + chunk);
    pool.emplace_back([lo, hi, &fn] {
      for (Index i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace scvamp
