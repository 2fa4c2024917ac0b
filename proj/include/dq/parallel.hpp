#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace dq {

/// Runs fn(i) for i in [0, count) on up to `workers` threads. Each index is
/// handled exactly once; results must be written to per-index slots by fn,
/// so the outcome does not depend on scheduling. The exception of the
/// lowest failing index, if any, is rethrown after all work has finished.
template <class Fn>
void parallel_for(std::size_t count, int workers, Fn&& fn) {
  std::vector<std::exception_ptr> errors(count);
  const std::size_t nthreads = std::min<std::size_t>(count, workers < 1 ? 1 : static_cast<std::size_t>(workers));
  if (nthreads <= 1) {
    for (std::size_t i = 0; i < count; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    for (std::size_t t = 0; t < nthreads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace dq
