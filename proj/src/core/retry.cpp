#include "pvatlas/core/retry.hpp"

#include <algorithm>
#include <cmath>

namespace pvatlas {

bool is_retryable(const Error& error) {
  if (error.code() == ErrorCode::TransportError) return true;
  if (error.code() == ErrorCode::UpstreamError && error.status()) {
    const int s = *error.status();
    return s == 429 || s >= 500;
  }
  return false;
}

std::chrono::milliseconds backoff_delay(const RetryPolicy& policy, int retry_index, double unit) {
  const double nominal = static_cast<double>(policy.base_delay.count()) *
                         std::pow(policy.factor, std::max(0, retry_index - 1));
  const double scaled = nominal * (1.0 - policy.jitter + 2.0 * policy.jitter * unit);
  const double capped = std::min(scaled, static_cast<double>(policy.max_delay.count()));
  return std::chrono::milliseconds(static_cast<long long>(std::llround(std::max(0.0, capped))));
}

}  // namespace pvatlas
