#pragma once

#include <chrono>
#include <cstdint>
#include <random>
#include <utility>

#include "pvatlas/core/clock.hpp"
#include "pvatlas/core/error.hpp"

namespace pvatlas {

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds base_delay{1000};
  double factor = 2.0;
  /// Delay is scaled by a uniform factor in [1 - jitter, 1 + jitter].
  double jitter = 0.2;
  std::chrono::milliseconds max_delay{60000};
};

/// Transport failures and HTTP 429/5xx are worth retrying; nothing else is.
bool is_retryable(const Error& error);

/// Delay before retry number `retry_index` (1 = first retry), with `unit` a
/// uniform draw in [0, 1).
std::chrono::milliseconds backoff_delay(const RetryPolicy& policy, int retry_index, double unit);

template <typename T>
struct Attempted {
  T value;
  int attempts = 1;
};

/// Calls fn until it succeeds, throws a non-retryable Error, or the attempt
/// budget is exhausted (the last error is rethrown). `jitter_seed` makes the
/// jitter sequence reproducible per call site.
template <typename Fn>
auto run_with_retry(const RetryPolicy& policy, Clock& clock, std::uint64_t jitter_seed, Fn&& fn)
    -> Attempted<decltype(fn())> {
  std::mt19937_64 rng(jitter_seed);
  for (int attempt = 1;; ++attempt) {
    try {
      return {fn(), attempt};
    } catch (const Error& e) {
      if (!is_retryable(e) || attempt >= policy.max_attempts) throw;
      const double unit = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      clock.sleep_for(backoff_delay(policy, attempt, unit));
    }
  }
}

}  // namespace pvatlas
