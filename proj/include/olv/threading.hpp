#pragma once

#include <atomic>
#include <thread>
#include <vector>

namespace olv {

// Process-wide worker count for the embarrassingly parallel loops (record
// generation, per-anchor window scoring prep). Results are deterministic for
// any value: every index writes only its own output slot.
inline int& worker_threads() {
  static int n = 1;
  return n;
}

template <typename F>
void parallel_for(int n, F&& body) {
  const int threads = std::min(worker_threads(), n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace olv
