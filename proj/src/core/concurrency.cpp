#include "pvatlas/core/concurrency.hpp"

#include <cmath>

namespace pvatlas {

TokenBucket::TokenBucket(Clock& clock, double tokens_per_second, double burst)
    : clock_(clock),
      rate_(tokens_per_second),
      capacity_(std::max(1.0, burst)),
      tokens_(capacity_),
      last_(clock.monotonic()) {}

void TokenBucket::acquire() {
  if (rate_ <= 0.0) return;
  for (;;) {
    std::chrono::milliseconds wait{0};
    {
      std::lock_guard lock(mu_);
      const auto now = clock_.monotonic();
      const double elapsed_s = std::chrono::duration<double>(now - last_).count();
      tokens_ = std::min(capacity_, tokens_ + elapsed_s * rate_);
      last_ = now;
      if (tokens_ >= 1.0) {
        tokens_ -= 1.0;
        return;
      }
      wait = std::chrono::milliseconds(
          static_cast<long long>(std::ceil((1.0 - tokens_) / rate_ * 1000.0)));
    }
    clock_.sleep_for(std::max(wait, std::chrono::milliseconds(1)));
  }
}

}  // namespace pvatlas
