#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "pvatlas/core/encoding.hpp"
#include "pvatlas/core/files.hpp"
#include "pvatlas/llm_gateway.hpp"
#include "support.hpp"

using namespace pvatlas;
using namespace std::chrono_literals;
namespace fs = std::filesystem;

namespace {

constexpr std::array kAllStatuses = {JobStatus::Uploaded,  JobStatus::Queued, JobStatus::Running,
                                     JobStatus::Succeeded, JobStatus::Failed, JobStatus::TimedOut};

const char* kExample1 =
    "{ \"solar_panels_present\": true,\n  \"location\": \"top-left\",\n  \"quantity\": \"0 to 1\",\n"
    "  \"likelihood_of_solar_panels_present\": 0.98,\n  \"confidence_of_solar_panels_present\": 0.90 }";

Timestamp t0() { return parse_utc("2024-06-01T00:00:00Z"); }

fs::path write_training(const testsupport::TempDir& dir, int records = 3) {
  const fs::path p = dir / "train.jsonl";
  std::ofstream out(p, std::ios::binary);
  for (int i = 0; i < records; ++i) {
    nlohmann::ordered_json rec;
    rec["messages"] = nlohmann::ordered_json::array(
        {{{"role", "system"}, {"content", "sys"}},
         {{"role", "user"}, {"content", "tile " + std::to_string(i)}},
         {{"role", "assistant"}, {"content", target_json_for_label(testsupport::label("t", i % 2 == 0))}}});
    out << rec.dump() << "\n";
  }
  return p;
}

FineTuneConfig fast_config() {
  FineTuneConfig c;
  c.poll_interval = 30s;
  c.job_timeout = 3600s;
  return c;
}

Tile tile_with(const std::string& id, RgbRaster px) {
  Tile t;
  t.tile_id = id;
  t.scene_id = id.substr(0, id.find('_'));
  t.pixels = std::move(px);
  return t;
}

RgbRaster white() { return RgbRaster(100, 100, {255, 255, 255}); }

RgbRaster with_block(int x, int y, int w, int h) {
  RgbRaster r = white();
  r.fill_rect(x, y, w, h, {30, 40, 90});
  return r;
}

std::vector<Tile> distinct_tiles(int n) {
  std::vector<Tile> out;
  for (int i = 0; i < n; ++i) {
    RgbRaster r = white();
    r.set(i % 100, i / 100, {static_cast<std::uint8_t>(i), 0, 0});
    char id[32];
    std::snprintf(id, sizeof id, "scene_r%dc%d", i / 4, i % 4);
    out.push_back(tile_with(id, std::move(r)));
  }
  return out;
}

ParseResult parse_heuristic(const RgbRaster& r) { return parse_model_output(heuristic_response(r)); }

}  // namespace

TEST_CASE("state machine: exhaustive transition table") {
  // Expected edges, written out independently of the implementation.
  const std::set<std::pair<JobStatus, JobStatus>> allowed{
      {JobStatus::Uploaded, JobStatus::Queued},   {JobStatus::Queued, JobStatus::Running},
      {JobStatus::Queued, JobStatus::Failed},     {JobStatus::Queued, JobStatus::TimedOut},
      {JobStatus::Running, JobStatus::Succeeded}, {JobStatus::Running, JobStatus::Failed},
      {JobStatus::Running, JobStatus::TimedOut}};
  for (auto from : kAllStatuses) {
    for (auto to : kAllStatuses) {
      CAPTURE(status_name(from));
      CAPTURE(status_name(to));
      CHECK(transition_allowed(from, to) == allowed.contains({from, to}));
    }
  }
  for (auto s : {JobStatus::Succeeded, JobStatus::Failed, JobStatus::TimedOut}) CHECK(is_terminal(s));
  for (auto s : {JobStatus::Uploaded, JobStatus::Queued, JobStatus::Running}) CHECK_FALSE(is_terminal(s));
}

TEST_CASE("job object enforces transitions and the model invariant") {
  FineTuneJob job("file-1", t0());
  CHECK(job.status() == JobStatus::Uploaded);
  CHECK(job.history().size() == 1);
  CHECK_THROWS_AS(job.transition(JobStatus::Running, t0()), Error);
  job.transition(JobStatus::Queued, t0() + 1s);
  CHECK_THROWS_AS(job.transition(JobStatus::Running, t0()), Error);  // time going backwards
  job.transition(JobStatus::Running, t0() + 2s);
  CHECK_THROWS_AS(job.transition(JobStatus::Succeeded, t0() + 3s), Error);
  CHECK_THROWS_AS(job.succeed("", t0() + 3s), Error);
  CHECK_FALSE(job.fine_tuned_model().has_value());
  job.succeed("ft:model", t0() + 3s);
  CHECK(job.fine_tuned_model() == "ft:model");
  CHECK(job.history().size() == 4);
  for (auto to : kAllStatuses) CHECK_THROWS_AS(job.transition(to, t0() + 4s), Error);

  const auto j = job_to_json(job);
  CHECK(j["status"] == "succeeded");
  CHECK(j["fine_tuned_model"] == "ft:model");
  CHECK(j["history"].size() == 4);
  CHECK(j["history"][3]["at"] == "2024-06-01T00:00:03Z");

  try {
    FineTuneJob other("f", t0());
    other.transition(JobStatus::Running, t0());
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::IllegalTransition);
  }
}

TEST_CASE("remote status mapping") {
  CHECK(map_remote_status("validating_files") == JobStatus::Queued);
  CHECK(map_remote_status("queued") == JobStatus::Queued);
  CHECK(map_remote_status("running") == JobStatus::Running);
  CHECK(map_remote_status("succeeded") == JobStatus::Succeeded);
  CHECK(map_remote_status("failed") == JobStatus::Failed);
  CHECK(map_remote_status("cancelled") == JobStatus::Failed);
  CHECK_FALSE(map_remote_status("exploded").has_value());
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(validate_config(FineTuneConfig{}));
  FineTuneConfig c;
  c.temperature = 0.7;
  CHECK_THROWS_AS(validate_config(c), Error);
  c = {};
  c.n_epochs = 0;
  CHECK_THROWS_AS(validate_config(c), Error);
  c = {};
  c.learning_rate = 0;
  CHECK_THROWS_AS(validate_config(c), Error);
  c = {};
  c.base_model = "";
  CHECK_THROWS_AS(validate_config(c), Error);
}

TEST_CASE("fine-tune success through the mock") {
  testsupport::TempDir dir;
  const fs::path train = write_training(dir);
  ManualClock clock(t0());
  MockBackend::Options opt;
  MockBackend backend(opt);
  const FineTuneJob job = upload_and_finetune(train, fast_config(), backend, clock);
  CHECK(job.status() == JobStatus::Succeeded);
  CHECK(job.fine_tuned_model() == opt.fine_tuned_model);
  REQUIRE(job.history().size() == 4);
  CHECK(job.history()[0].status == JobStatus::Uploaded);
  CHECK(job.history()[1].status == JobStatus::Queued);
  CHECK(job.history()[2].status == JobStatus::Running);
  CHECK(job.history()[3].status == JobStatus::Succeeded);
  // created queued, then one poll per scripted step
  CHECK(job.history()[3].at - job.history()[1].at == 60s);
  CHECK(backend.retrieve_calls() == 2);
  CHECK(job.training_file_id().rfind("file-", 0) == 0);
  CHECK(job.job_id().rfind("ftjob-", 0) == 0);
  REQUIRE(backend.last_job_config().has_value());
  CHECK(backend.last_job_config()->n_epochs == 5);
}

TEST_CASE("fine-tune failure and timeout") {
  testsupport::TempDir dir;
  const fs::path train = write_training(dir);

  SUBCASE("remote failure") {
    ManualClock clock(t0());
    MockBackend::Options opt;
    opt.job_script = {"queued", "running", "failed"};
    MockBackend backend(opt);
    try {
      upload_and_finetune(train, fast_config(), backend, clock);
      FAIL("no error");
    } catch (const FineTuneError& e) {
      CHECK(e.code() == ErrorCode::JobFailed);
      CHECK(e.job().status() == JobStatus::Failed);
      CHECK_FALSE(e.job().fine_tuned_model().has_value());
      CHECK(e.job().history().back().status == JobStatus::Failed);
    }
  }
  SUBCASE("rejected while queued") {
    ManualClock clock(t0());
    MockBackend::Options opt;
    opt.job_script = {"validating_files", "failed"};
    MockBackend backend(opt);
    CHECK_THROWS_AS(upload_and_finetune(train, fast_config(), backend, clock), FineTuneError);
  }
  SUBCASE("never terminates") {
    ManualClock clock(t0());
    MockBackend::Options opt;
    opt.job_script = {"queued", "running"};
    MockBackend backend(opt);
    FineTuneConfig cfg = fast_config();
    cfg.job_timeout = 1s;
    try {
      upload_and_finetune(train, cfg, backend, clock);
      FAIL("no error");
    } catch (const FineTuneError& e) {
      CHECK(e.code() == ErrorCode::JobTimeout);
      CHECK(e.job().status() == JobStatus::TimedOut);
      CHECK_FALSE(e.job().fine_tuned_model().has_value());
    }
    CHECK(clock.monotonic() >= 1s);
    CHECK(clock.monotonic() < 2s);
  }
  SUBCASE("upload and create failures") {
    ManualClock clock(t0());
    MockBackend::Options opt;
    opt.fail_upload = true;
    MockBackend a(opt);
    try {
      upload_and_finetune(train, fast_config(), a, clock);
      FAIL("no error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::UploadFailed);
    }
    opt.fail_upload = false;
    opt.fail_create = true;
    MockBackend b(opt);
    try {
      upload_and_finetune(train, fast_config(), b, clock);
      FAIL("no error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::JobCreateFailed);
    }
  }
}

TEST_CASE("training file validation names the bad line") {
  testsupport::TempDir dir;
  const fs::path p = write_training(dir, 2);
  CHECK(validate_training_file(p) == 2);
  {
    std::ofstream out(p, std::ios::app | std::ios::binary);
    out << R"({"messages":[{"role":"system","content":"s"},{"role":"user","content":"u"},{"role":"assistant","content":"maybe"}]})"
        << "\n";
  }
  try {
    validate_training_file(p);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UploadFailed);
    CHECK(e.line() == 3);
  }
  write_file_atomic(dir / "empty.jsonl", std::string_view(""));
  CHECK_THROWS_AS(validate_training_file(dir / "empty.jsonl"), Error);
}

TEST_CASE("flaky transport during fine-tune polling over the REST backend") {
  testsupport::TempDir dir;
  const fs::path train = write_training(dir);
  testsupport::ScriptedHttpClient http;
  http.push(200, R"({"id":"file-abc","object":"file"})");
  http.push(200, R"({"id":"ftjob-1","status":"validating_files"})");
  http.push_transport_failure();
  http.push(503, "busy", "text/plain");
  http.push(200, R"({"id":"ftjob-1","status":"running"})");
  http.push(200, R"({"id":"ftjob-1","status":"succeeded","fine_tuned_model":"ft:gpt-4o:x"})");
  OpenAiBackend backend(http, "https://llm.example/v1", "sk-secret", dir / "audit.jsonl");
  ManualClock clock(t0());
  const FineTuneJob job = upload_and_finetune(train, fast_config(), backend, clock);
  CHECK(job.status() == JobStatus::Succeeded);
  CHECK(job.fine_tuned_model() == "ft:gpt-4o:x");
  CHECK(job.training_file_id() == "file-abc");
  CHECK(job.history().size() == 4);
  CHECK(http.requests.size() == 6);
  CHECK(http.requests[0].url == "https://llm.example/v1/files");
  CHECK(http.requests[1].url == "https://llm.example/v1/fine_tuning/jobs");
  CHECK(http.requests[2].url == "https://llm.example/v1/fine_tuning/jobs/ftjob-1");

  const auto create = nlohmann::json::parse(http.requests[1].body);
  CHECK(create["training_file"] == "file-abc");
  CHECK(create["model"] == "gpt-4o-2024-08-06");
  CHECK(create["hyperparameters"]["n_epochs"] == 5);
  CHECK(create["hyperparameters"]["batch_size"] == 8);

  const std::string audit = read_text_file(dir / "audit.jsonl");
  CHECK(audit.find("sk-secret") == std::string::npos);
  CHECK(audit.find("Bearer <redacted>") != std::string::npos);
  CHECK(audit.find("transport_error") != std::string::npos);
}

TEST_CASE("chat over REST: 429 then 200 is retried and the audit log elides images") {
  testsupport::TempDir dir;
  testsupport::ScriptedHttpClient http;
  http.push(429, R"({"error":{"message":"rate limited"}})");
  nlohmann::json reply;
  reply["choices"] = nlohmann::json::array({{{"message", {{"role", "assistant"}, {"content", kExample1}}}}});
  http.push(200, reply.dump());
  OpenAiBackend backend(http, "https://llm.example/v1", "sk-secret", dir / "audit.jsonl");
  ManualClock clock(t0());
  const Tile tile = tile_with("s_r0c0", with_block(10, 10, 40, 20));
  const InferResult r = infer_tile(tile, "ft:model", default_prompt_template(), backend, clock);
  CHECK(r.raw_text == kExample1);
  CHECK(r.attempts == 2);
  CHECK(clock.total_slept() >= 800ms);
  CHECK(clock.total_slept() <= 1200ms);

  const auto body = nlohmann::json::parse(http.requests[1].body);
  CHECK(body["model"] == "ft:model");
  CHECK(body["temperature"] == 0.0);
  CHECK(body["messages"][0]["role"] == "system");
  CHECK(body["messages"][1]["content"][1]["image_url"]["url"].get<std::string>().rfind("data:image/png;base64,", 0) == 0);

  const std::string audit = read_text_file(dir / "audit.jsonl");
  CHECK(audit.find("sk-secret") == std::string::npos);
  CHECK(audit.find("data:image/png;base64,") == std::string::npos);
  CHECK(audit.find("<data-url sha256=") != std::string::npos);

  http.push(400, R"({"error":{"message":"bad"}})");
  try {
    infer_tile(tile, "ft:model", default_prompt_template(), backend, clock);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UpstreamError);
    CHECK(e.status() == 400);
  }
}

TEST_CASE("heuristic on synthetic rasters") {
  const ParseResult blank = parse_heuristic(white());
  REQUIRE(blank.ok());
  CHECK(blank.prediction().parse_path == ParsePath::Strict);
  CHECK_FALSE(blank.prediction().present);
  CHECK(blank.prediction().location == LocationClass::NA);
  CHECK(blank.prediction().quantity == QuantityBin::NA);
  CHECK(blank.prediction().likelihood < 0.5);

  // 40x20 dark-blue block with its centroid at (25, 15): top-left cell
  const ParseResult block = parse_heuristic(with_block(5, 5, 40, 20));
  REQUIRE(block.ok());
  CHECK(block.prediction().present);
  CHECK(block.prediction().location == LocationClass::TopLeft);
  CHECK(block.prediction().quantity != QuantityBin::NA);
  CHECK(block.prediction().likelihood >= 0.5);

  // the same block in the middle-bottom cell
  const ParseResult bottom = parse_heuristic(with_block(30, 75, 40, 20));
  REQUIRE(bottom.ok());
  CHECK(bottom.prediction().location == LocationClass::Bottom);

  // a ragged scatter is not a panel array
  RgbRaster speckle = white();
  for (int y = 0; y < 100; y += 2)
    for (int x = (y / 2) % 2; x < 100; x += 2) speckle.set(x, y, {30, 40, 90});
  CHECK_FALSE(parse_heuristic(speckle).prediction().present);

  CHECK(heuristic_response(with_block(5, 5, 40, 20)) == heuristic_response(with_block(5, 5, 40, 20)));
}

TEST_CASE("mock responses: fixtures, heuristic, empty completion") {
  const Tile tile = tile_with("s_r0c0", with_block(5, 5, 40, 20));
  FixtureMap fixtures{{pixel_digest(tile.pixels), kExample1}};
  CHECK(mock_respond(tile.pixels, fixtures, false) == std::string(kExample1));
  CHECK_FALSE(mock_respond(white(), fixtures, false).has_value());
  CHECK(mock_respond(white(), fixtures, true) == heuristic_response(white()));

  ManualClock clock(t0());
  MockBackend::Options opt;
  opt.fixtures = fixtures;
  MockBackend backend(opt);
  CHECK(infer_tile(tile, "m", default_prompt_template(), backend, clock).raw_text == kExample1);
  try {
    infer_tile(tile_with("s_r0c1", white()), "m", default_prompt_template(), backend, clock);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyCompletion);
  }
  CHECK_THROWS_AS(infer_tile(tile, "", default_prompt_template(), backend, clock), Error);
}

TEST_CASE("batch inference: partial failures, retries, determinism") {
  const auto tiles = distinct_tiles(64);
  FixtureMap fixtures;
  for (std::size_t i = 3; i < tiles.size(); ++i) fixtures[pixel_digest(tiles[i].pixels)] = kExample1;
  const PromptTemplate tmpl = default_prompt_template();

  const auto run = [&](int parallelism, std::map<std::string, int> flaky) {
    ManualClock clock(t0());
    MockBackend::Options opt;
    opt.fixtures = fixtures;
    opt.transient_failures = std::move(flaky);
    MockBackend backend(opt);
    BatchOptions bo;
    bo.parallelism = parallelism;
    return batch_infer(tiles, "m", tmpl, backend, bo, clock);
  };

  const auto one = run(1, {});
  REQUIRE(one.size() == 64);
  int ok = 0;
  for (const auto& [id, o] : one) {
    if (o.ok()) {
      ++ok;
      CHECK(*o.raw_text == kExample1);
    } else {
      CHECK(o.error_code == ErrorCode::EmptyCompletion);
    }
  }
  CHECK(ok == 61);
  CHECK_FALSE(one.at(tiles[0].tile_id).ok());
  CHECK(run(8, {}) == one);

  std::map<std::string, int> flaky{{pixel_digest(tiles[10].pixels), 2}, {pixel_digest(tiles[20].pixels), 9}};
  const auto f1 = run(1, flaky);
  const auto f8 = run(8, flaky);
  CHECK(f1 == f8);
  CHECK(f1.at(tiles[10].tile_id).ok());
  CHECK(f1.at(tiles[10].tile_id).attempts == 3);
  CHECK_FALSE(f1.at(tiles[20].tile_id).ok());
  CHECK(f1.at(tiles[20].tile_id).attempts == 5);
  CHECK(f1.at(tiles[20].tile_id).error_code == ErrorCode::UpstreamError);

  ManualClock clock(t0());
  MockBackend backend(MockBackend::Options{});
  BatchOptions bad;
  bad.parallelism = 0;
  CHECK_THROWS_AS(batch_infer(tiles, "m", tmpl, backend, bad, clock), Error);
}

TEST_CASE("batch inference respects the request rate") {
  const auto tiles = distinct_tiles(20);
  ManualClock clock(t0());
  MockBackend::Options opt;
  opt.heuristic_enabled = true;
  MockBackend backend(opt);
  BatchOptions bo;
  bo.parallelism = 1;
  bo.requests_per_second = 10;
  const auto out = batch_infer(tiles, "m", default_prompt_template(), backend, bo, clock);
  CHECK(out.size() == 20);
  // burst of one, then 19 more tokens at 100 ms each
  CHECK(clock.monotonic() >= 1900ms);
}

TEST_CASE("language-model cross-entropy") {
  TokenLossInput uniform{{{0.25, 0.25, 0.25, 0.25}}};
  CHECK(std::abs(lm_cross_entropy(uniform) - std::log(4.0)) < 1e-12);
  CHECK(lm_cross_entropy(TokenLossInput{{{1.0, 1.0, 1.0}}}) == 0.0);
  CHECK(std::abs(lm_cross_entropy(TokenLossInput{{{0.5, 0.25}, {1.0}}}) - 0.519860) < 1e-6);
  CHECK(lm_cross_entropy(TokenLossInput{{{0.5, 0.9}}}) > lm_cross_entropy(TokenLossInput{{{0.6, 0.9}}}));

  try {
    lm_cross_entropy(TokenLossInput{{{0.5, 0.0}}});
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidProbability);
  }
  CHECK_THROWS_AS(lm_cross_entropy(TokenLossInput{{{1.5}}}), Error);
  CHECK_THROWS_AS(lm_cross_entropy(TokenLossInput{}), Error);
  CHECK_THROWS_AS(lm_cross_entropy(TokenLossInput{{{}}}), Error);
}
