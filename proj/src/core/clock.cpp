#include "pvatlas/core/clock.hpp"

#include <cctype>
#include <charconv>
#include <ctime>
#include <thread>

#include "pvatlas/core/error.hpp"

namespace pvatlas {

std::string format_utc(Timestamp t) {
  const std::time_t tt = t.time_since_epoch().count();
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

int read_digits(std::string_view text, std::size_t pos, std::size_t count) {
  if (pos + count > text.size()) throw Error(ErrorCode::ParseError, "truncated timestamp");
  int value = 0;
  const auto* first = text.data() + pos;
  const auto [ptr, ec] = std::from_chars(first, first + count, value);
  if (ec != std::errc{} || ptr != first + count) {
    throw Error(ErrorCode::ParseError, "bad digits in timestamp '" + std::string(text) + "'");
  }
  return value;
}

void expect_char(std::string_view text, std::size_t pos, char c) {
  if (pos >= text.size() || text[pos] != c) {
    throw Error(ErrorCode::ParseError, "malformed timestamp '" + std::string(text) + "'");
  }
}

}  // namespace

Timestamp parse_utc(std::string_view text) {
  using namespace std::chrono;
  const int y = read_digits(text, 0, 4);
  expect_char(text, 4, '-');
  const int mo = read_digits(text, 5, 2);
  expect_char(text, 7, '-');
  const int d = read_digits(text, 8, 2);
  if (text.size() <= 10 || (text[10] != 'T' && text[10] != ' ')) {
    throw Error(ErrorCode::ParseError, "malformed timestamp '" + std::string(text) + "'");
  }
  const int h = read_digits(text, 11, 2);
  expect_char(text, 13, ':');
  const int mi = read_digits(text, 14, 2);
  expect_char(text, 16, ':');
  const int s = read_digits(text, 17, 2);
  std::size_t pos = 19;
  if (pos < text.size() && text[pos] == '.') {
    ++pos;
    while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
  }
  const std::string_view zone = text.substr(std::min(pos, text.size()));
  if (zone != "Z" && zone != "+00:00") {
    throw Error(ErrorCode::ParseError, "timestamp must be UTC: '" + std::string(text) + "'");
  }
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || s > 60) {
    throw Error(ErrorCode::ParseError, "timestamp out of range '" + std::string(text) + "'");
  }
  return sys_days{ymd} + hours{h} + minutes{mi} + seconds{s};
}

Timestamp SystemClock::now() {
  return std::chrono::floor<std::chrono::seconds>(std::chrono::system_clock::now());
}

std::chrono::milliseconds SystemClock::monotonic() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
      std::chrono::steady_clock::now().time_since_epoch());
}

void SystemClock::sleep_for(std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }

Timestamp ManualClock::now() {
  std::lock_guard lock(mu_);
  return std::chrono::floor<std::chrono::seconds>(now_);
}

std::chrono::milliseconds ManualClock::monotonic() {
  std::lock_guard lock(mu_);
  return slept_;
}

void ManualClock::sleep_for(std::chrono::milliseconds d) {
  std::lock_guard lock(mu_);
  now_ += d;
  slept_ += d;
}

std::chrono::milliseconds ManualClock::total_slept() const {
  std::lock_guard lock(mu_);
  return slept_;
}

}  // namespace pvatlas
