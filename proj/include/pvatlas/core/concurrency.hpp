#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "pvatlas/core/clock.hpp"

namespace pvatlas {

/// Token bucket shared by concurrent workers. A non-positive rate disables
/// limiting.
class TokenBucket {
 public:
  TokenBucket(Clock& clock, double tokens_per_second, double burst = 1.0);

  /// Blocks (via the clock) until one token is available, then takes it.
  void acquire();

 private:
  Clock& clock_;
  double rate_;
  double capacity_;
  double tokens_;
  std::chrono::milliseconds last_;
  std::mutex mu_;
};

/// Runs fn(i) for i in [0, n) on at most `parallelism` threads. The first
/// exception thrown by any call is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, int parallelism, Fn&& fn) {
  const std::size_t workers =
      std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, parallelism)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace pvatlas
