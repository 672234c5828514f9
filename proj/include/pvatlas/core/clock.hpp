#pragma once

#include <chrono>
#include <mutex>
#include <string>
#include <string_view>

namespace pvatlas {

using Timestamp = std::chrono::sys_seconds;

/// "YYYY-MM-DDTHH:MM:SSZ".
std::string format_utc(Timestamp t);

/// Accepts "YYYY-MM-DDTHH:MM:SS[.fraction](Z|+00:00)"; fractions are truncated.
/// Throws Error{ParseError}.
Timestamp parse_utc(std::string_view text);

/// Time source plus sleeping, so polling and backoff can run on virtual time.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual Timestamp now() = 0;
  /// Monotonic time since an arbitrary origin.
  virtual std::chrono::milliseconds monotonic() = 0;
  virtual void sleep_for(std::chrono::milliseconds d) = 0;
};

class SystemClock final : public Clock {
 public:
  Timestamp now() override;
  std::chrono::milliseconds monotonic() override;
  void sleep_for(std::chrono::milliseconds d) override;
};

/// Virtual clock: starts at a fixed instant and only moves when slept on.
/// Used for the fixed-clock mode and in tests.
class ManualClock final : public Clock {
 public:
  explicit ManualClock(Timestamp start) : now_(start) {}
  Timestamp now() override;
  std::chrono::milliseconds monotonic() override;
  void sleep_for(std::chrono::milliseconds d) override;
  std::chrono::milliseconds total_slept() const;

 private:
  mutable std::mutex mu_;
  std::chrono::sys_time<std::chrono::milliseconds> now_;
  std::chrono::milliseconds slept_{0};
};

}  // namespace pvatlas
