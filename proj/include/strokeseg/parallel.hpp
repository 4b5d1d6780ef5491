#pragma once

#include <algorithm>
#include <thread>
#include <vector>

namespace strokeseg {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Work items must be
/// independent; exceptions propagate from the calling thread only when
/// workers == 1, otherwise they terminate (callers validate inputs first).
template <typename Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&, t] {
      for (int i = t; i < n; i += workers) fn(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace strokeseg
