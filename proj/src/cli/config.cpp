#include <cstdlib>
#include <fstream>

#include "pvatlas/cli.hpp"
#include "pvatlas/core/error.hpp"
#include "pvatlas/core/files.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pvatlas {

const RegionSpec& PipelineConfig::region(const std::string& name) const {
  for (const auto& r : regions) {
    if (r.name == name) return r;
  }
  throw Error(ErrorCode::UsageError, "unknown region '" + name + "'");
}

namespace {

fs::path resolve(const fs::path& base, const json& value) {
  fs::path p = value.get<std::string>();
  if (p.empty() || p.is_absolute()) return p;
  return base / p;
}

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed, const std::string& where) {
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw Error(ErrorCode::ConfigError, "unknown key '" + key + "' in " + where);
    }
  }
}

RetryPolicy parse_retry(const json& j) {
  check_keys(j, {"max_attempts", "base_delay_ms", "factor", "jitter", "max_delay_ms"}, "finetune.retry");
  RetryPolicy r;
  r.max_attempts = j.value("max_attempts", r.max_attempts);
  r.base_delay = std::chrono::milliseconds(j.value("base_delay_ms", r.base_delay.count()));
  r.factor = j.value("factor", r.factor);
  r.jitter = j.value("jitter", r.jitter);
  r.max_delay = std::chrono::milliseconds(j.value("max_delay_ms", r.max_delay.count()));
  return r;
}

}  // namespace

PipelineConfig parse_config(const json& doc, const fs::path& base_dir) {
  PipelineConfig c;
  try {
    if (!doc.is_object()) throw Error(ErrorCode::ConfigError, "configuration must be a JSON object");
    check_keys(doc,
               {"workdir", "regions", "source_region", "overpass", "imagery", "dedupe_radius_m", "llm",
                "finetune", "inference", "seed", "ece_bins"},
               "configuration");
    c.workdir = resolve(base_dir, doc.value("workdir", json("work")));
    c.regions = doc.at("regions").get<std::vector<RegionSpec>>();
    validate_campaign(c.regions);

    if (auto it = doc.find("overpass"); it != doc.end()) {
      check_keys(*it, {"endpoint", "fixture_dir", "tags"}, "overpass");
      if (it->contains("tags")) {
        c.overpass.tags.tags = (*it)["tags"].get<std::vector<std::pair<std::string, std::string>>>();
        if (c.overpass.tags.tags.empty()) throw Error(ErrorCode::ConfigError, "overpass.tags must not be empty");
      }
      c.overpass.endpoint = it->value("endpoint", c.overpass.endpoint);
      if (it->contains("fixture_dir")) c.overpass.fixture_dir = resolve(base_dir, (*it)["fixture_dir"]);
    }
    if (auto it = doc.find("imagery"); it != doc.end()) {
      check_keys(*it, {"provider", "base_url", "key_env", "fixture_dir", "parallelism", "requests_per_second"},
                 "imagery");
      c.imagery.provider = it->value("provider", c.imagery.provider);
      c.imagery.base_url = it->value("base_url", c.imagery.base_url);
      c.imagery.key_env = it->value("key_env", c.imagery.key_env);
      if (it->contains("fixture_dir")) c.imagery.fixture_dir = resolve(base_dir, (*it)["fixture_dir"]);
      c.imagery.parallelism = it->value("parallelism", c.imagery.parallelism);
      c.imagery.requests_per_second = it->value("requests_per_second", c.imagery.requests_per_second);
    }
    if (c.imagery.provider != "static_maps" && c.imagery.provider != "fixture" && c.imagery.provider != "synthetic") {
      throw Error(ErrorCode::ConfigError, "imagery.provider must be static_maps, fixture or synthetic");
    }
    if (c.imagery.provider == "fixture" && c.imagery.fixture_dir.empty()) {
      throw Error(ErrorCode::ConfigError, "imagery.fixture_dir is required for the fixture provider");
    }
    if (c.imagery.parallelism < 1) throw Error(ErrorCode::ConfigError, "imagery.parallelism must be >= 1");

    c.dedupe_radius_m = doc.value("dedupe_radius_m", c.dedupe_radius_m);
    if (c.dedupe_radius_m < 0) throw Error(ErrorCode::ConfigError, "dedupe_radius_m must be >= 0");

    if (auto it = doc.find("llm"); it != doc.end()) {
      check_keys(*it, {"backend", "base_url", "key_env", "fixtures", "heuristic"}, "llm");
      c.llm.backend = it->value("backend", c.llm.backend);
      c.llm.base_url = it->value("base_url", c.llm.base_url);
      c.llm.key_env = it->value("key_env", c.llm.key_env);
      if (it->contains("fixtures")) c.llm.fixtures = resolve(base_dir, (*it)["fixtures"]);
      c.llm.heuristic = it->value("heuristic", c.llm.heuristic);
    }
    if (c.llm.backend != "remote" && c.llm.backend != "mock") {
      throw Error(ErrorCode::ConfigError, "llm.backend must be remote or mock");
    }

    if (auto it = doc.find("finetune"); it != doc.end()) {
      check_keys(*it,
                 {"base_model", "n_epochs", "batch_size", "learning_rate", "temperature", "poll_interval_s",
                  "job_timeout_s", "retry"},
                 "finetune");
      auto& f = c.finetune;
      f.base_model = it->value("base_model", f.base_model);
      f.n_epochs = it->value("n_epochs", f.n_epochs);
      f.batch_size = it->value("batch_size", f.batch_size);
      f.learning_rate = it->value("learning_rate", f.learning_rate);
      f.temperature = it->value("temperature", f.temperature);
      f.poll_interval = std::chrono::seconds(it->value("poll_interval_s", f.poll_interval.count()));
      f.job_timeout = std::chrono::seconds(it->value("job_timeout_s", f.job_timeout.count()));
      if (it->contains("retry")) f.retry = parse_retry((*it)["retry"]);
    }
    try {
      validate_config(c.finetune);
    } catch (const Error& e) {
      throw Error(ErrorCode::ConfigError, std::string("finetune: ") + e.what());
    }

    if (auto it = doc.find("inference"); it != doc.end()) {
      check_keys(*it, {"parallelism", "requests_per_second"}, "inference");
      c.inference.parallelism = it->value("parallelism", c.inference.parallelism);
      c.inference.requests_per_second = it->value("requests_per_second", c.inference.requests_per_second);
    }
    if (c.inference.parallelism < 1) throw Error(ErrorCode::ConfigError, "inference.parallelism must be >= 1");

    c.seed = doc.value("seed", std::uint64_t{0});
    c.ece_bins = doc.value("ece_bins", 10);
    if (c.ece_bins < 1) throw Error(ErrorCode::ConfigError, "ece_bins must be >= 1");

    if (auto it = doc.find("source_region"); it != doc.end()) {
      c.source_region = it->get<std::string>();
    } else {
      for (const auto& r : c.regions) {
        if (r.role == RegionRole::FineTune) {
          c.source_region = r.name;
          break;
        }
      }
    }
    if (!c.source_region.empty()) c.region(c.source_region);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigError) throw;
    throw Error(ErrorCode::ConfigError, e.what());
  }
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const Error& e) {
    throw Error(ErrorCode::ConfigError, e.what());
  }
  json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded()) throw Error(ErrorCode::ConfigError, path.string() + " is not valid JSON");
  return parse_config(doc, fs::absolute(path).parent_path());
}

std::string resolve_secret(const std::string& env_name, const std::string& purpose) {
  const char* v = env_name.empty() ? nullptr : std::getenv(env_name.c_str());
  if (v == nullptr || *v == '\0') {
    throw Error(ErrorCode::ConfigError, purpose + " needs environment variable " +
                                            (env_name.empty() ? "<unset>" : env_name));
  }
  return v;
}

FixtureMap load_fixture_map(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot open mock fixtures " + path.string());
  FixtureMap out;
  std::string text;
  int line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    const json rec = json::parse(text, nullptr, false);
    if (rec.is_discarded() || !rec.is_object() || !rec.contains("pixel_digest") || !rec.contains("response") ||
        !rec["pixel_digest"].is_string() || !rec["response"].is_string()) {
      throw Error(ErrorCode::ParseError, "fixture record needs string pixel_digest and response", line_no);
    }
    out.insert_or_assign(rec["pixel_digest"].get<std::string>(), rec["response"].get<std::string>());
  }
  return out;
}

}  // namespace pvatlas
