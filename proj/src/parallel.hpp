#pragma once

#include <algorithm>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace xmae::detail {

// Runs fn(0..n-1) on up to `threads` workers, task i on worker i % threads.
// The first exception (by worker) is rethrown after all workers join.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const auto t = static_cast<std::size_t>(std::max(1, threads));
  if (t == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errs(std::min(t, n));
  for (std::size_t w = 0; w < errs.size(); ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += errs.size()) fn(i);
      } catch (...) {
        errs[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

}  // namespace xmae::detail
