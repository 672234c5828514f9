#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <thread>

#include "pvatlas/core/clock.hpp"
#include "pvatlas/core/concurrency.hpp"
#include "pvatlas/core/encoding.hpp"
#include "pvatlas/core/error.hpp"
#include "pvatlas/core/files.hpp"
#include "pvatlas/core/http.hpp"
#include "pvatlas/core/raster.hpp"
#include "pvatlas/core/retry.hpp"
#include "support.hpp"

using namespace pvatlas;
using namespace std::chrono_literals;

TEST_CASE("error message carries code, line and status") {
  const Error e(ErrorCode::ParseError, "bad", 3, 404);
  CHECK(e.code() == ErrorCode::ParseError);
  CHECK(e.line() == 3);
  CHECK(e.status() == 404);
  CHECK(std::string(e.what()).find("ParseError") == 0);
  CHECK(std::string(e.what()).find("line=3") != std::string::npos);
  CHECK(error_code_name(ErrorCode::PortInUse) == "PortInUse");
}

TEST_CASE("sha256 and base64 known answers") {
  CHECK(sha256_hex(std::string_view("")) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex(std::string_view("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const std::string text = "foobar";
  const std::vector<std::uint8_t> bytes(text.begin(), text.end());
  CHECK(base64_encode(bytes) == "Zm9vYmFy");
  const std::vector<std::uint8_t> two{'f', 'o'};
  CHECK(base64_encode(two) == "Zm8=");
  CHECK(base64_decode("Zm8=") == two);
  CHECK(base64_decode("Zm9vYmFy") == bytes);
  CHECK_THROWS_AS(base64_decode("@@@@"), Error);
}

TEST_CASE("raster crop, blit and PNG round trip") {
  RgbRaster r(7, 5, {1, 2, 3});
  r.set(6, 4, {200, 100, 50});
  r.fill_rect(1, 1, 2, 2, {9, 9, 9});
  const RgbRaster c = r.crop(1, 1, 2, 2);
  CHECK(c.width() == 2);
  CHECK(c.at(1, 1) == Rgb{9, 9, 9});
  RgbRaster back(7, 5, {1, 2, 3});
  back.blit(c, 1, 1);
  back.set(6, 4, {200, 100, 50});
  CHECK(back == r);

  const auto png = encode_png(r);
  CHECK(decode_png(png) == r);
  CHECK(pixel_digest(decode_png(png)) == pixel_digest(r));
  CHECK_THROWS_AS(encode_png(RgbRaster()), Error);
  const std::vector<std::uint8_t> junk{1, 2, 3, 4};
  CHECK_THROWS_AS(decode_png(junk), Error);
}

TEST_CASE("pixel digest depends on dimensions") {
  const RgbRaster a(2, 3);
  const RgbRaster b(3, 2);
  CHECK(a.bytes().size() == b.bytes().size());
  CHECK(pixel_digest(a) != pixel_digest(b));
}

TEST_CASE("UTC timestamps") {
  const Timestamp t = parse_utc("2024-02-29T23:59:58Z");
  CHECK(format_utc(t) == "2024-02-29T23:59:58Z");
  CHECK(parse_utc("2024-02-29T23:59:58.75+00:00") == t);
  CHECK_THROWS_AS(parse_utc("2024-02-30T00:00:00Z"), Error);
  CHECK_THROWS_AS(parse_utc("2024-02-01T00:00:00+02:00"), Error);
  CHECK_THROWS_AS(parse_utc("yesterday"), Error);
}

TEST_CASE("manual clock only moves when slept on") {
  ManualClock clock(parse_utc("2024-01-01T00:00:00Z"));
  CHECK(clock.monotonic() == 0ms);
  clock.sleep_for(1500ms);
  CHECK(clock.monotonic() == 1500ms);
  CHECK(format_utc(clock.now()) == "2024-01-01T00:00:01Z");
  CHECK(clock.total_slept() == 1500ms);
}

TEST_CASE("format_double is shortest round trip") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(0.75) == "0.75");
  CHECK(std::stod(format_double(2.0 / 3.0)) == 2.0 / 3.0);
}

TEST_CASE("atomic write creates parents and replaces content") {
  testsupport::TempDir dir;
  const auto p = dir / "a/b/c.txt";
  write_file_atomic(p, std::string_view("one"));
  write_file_atomic(p, std::string_view("two"));
  CHECK(read_text_file(p) == "two");
  CHECK_THROWS_AS(read_text_file(dir / "missing"), Error);
}

TEST_CASE("url helpers") {
  CHECK(url_encode("a b&c=d/é") == "a%20b%26c%3Dd%2F%C3%A9");
  const auto parts = split_url("https://example.org:8443/v1/files?x=1");
  CHECK(parts.scheme_host_port == "https://example.org:8443");
  CHECK(parts.path_and_query == "/v1/files?x=1");
}

TEST_CASE("retry classification and backoff schedule") {
  CHECK(is_retryable(Error(ErrorCode::TransportError, "x")));
  CHECK(is_retryable(Error(ErrorCode::UpstreamError, "x", std::nullopt, 429)));
  CHECK(is_retryable(Error(ErrorCode::UpstreamError, "x", std::nullopt, 503)));
  CHECK_FALSE(is_retryable(Error(ErrorCode::UpstreamError, "x", std::nullopt, 400)));
  CHECK_FALSE(is_retryable(Error(ErrorCode::ParseError, "x")));

  RetryPolicy p;
  // unit 0.5 sits at the jitter midpoint: the nominal 1, 2, 4, 8 s schedule.
  CHECK(backoff_delay(p, 1, 0.5) == 1000ms);
  CHECK(backoff_delay(p, 2, 0.5) == 2000ms);
  CHECK(backoff_delay(p, 4, 0.5) == 8000ms);
  CHECK(backoff_delay(p, 1, 0.0) == 800ms);
  CHECK(backoff_delay(p, 20, 0.5) == 60000ms);
}

TEST_CASE("run_with_retry retries transient failures then gives up") {
  ManualClock clock(parse_utc("2024-01-01T00:00:00Z"));
  RetryPolicy p;
  int calls = 0;
  auto ok = run_with_retry(p, clock, 1, [&] {
    if (++calls < 3) throw Error(ErrorCode::UpstreamError, "busy", std::nullopt, 429);
    return 42;
  });
  CHECK(ok.value == 42);
  CHECK(ok.attempts == 3);
  CHECK(clock.total_slept() >= 2400ms);  // 0.8 s + 1.6 s lower bounds

  calls = 0;
  CHECK_THROWS_AS(run_with_retry(p, clock, 1,
                                 [&]() -> int {
                                   ++calls;
                                   throw Error(ErrorCode::TransportError, "down");
                                 }),
                  Error);
  CHECK(calls == 5);

  calls = 0;
  CHECK_THROWS_AS(run_with_retry(p, clock, 1,
                                 [&]() -> int {
                                   ++calls;
                                   throw Error(ErrorCode::UpstreamError, "denied", std::nullopt, 403);
                                 }),
                  Error);
  CHECK(calls == 1);
}

TEST_CASE("token bucket paces requests on virtual time") {
  ManualClock clock(parse_utc("2024-01-01T00:00:00Z"));
  TokenBucket bucket(clock, 2.0, 1.0);
  for (int i = 0; i < 5; ++i) bucket.acquire();
  // first token is free, the other four arrive every 500 ms
  CHECK(clock.monotonic() >= 2000ms);
  CHECK(clock.monotonic() < 2100ms);

  TokenBucket unlimited(clock, 0.0);
  const auto before = clock.monotonic();
  for (int i = 0; i < 100; ++i) unlimited.acquire();
  CHECK(clock.monotonic() == before);
}

TEST_CASE("parallel_for visits every index once and rethrows") {
  std::vector<std::atomic<int>> seen(1000);
  parallel_for(seen.size(), 8, [&](std::size_t i) { ++seen[i]; });
  for (const auto& s : seen) CHECK(s.load() == 1);
  CHECK_THROWS_AS(parallel_for(10, 4,
                               [](std::size_t i) {
                                 if (i == 7) throw std::runtime_error("boom");
                               }),
                  std::runtime_error);
}
