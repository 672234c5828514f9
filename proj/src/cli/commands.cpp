#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include "pvatlas/cli.hpp"
#include "pvatlas/core/concurrency.hpp"
#include "pvatlas/core/encoding.hpp"
#include "pvatlas/core/error.hpp"
#include "pvatlas/core/files.hpp"
#include "pvatlas/evaluation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace pvatlas {

namespace {

constexpr std::string_view kDefaultClockStart = "2024-01-01T00:00:00Z";

struct Context {
  PipelineConfig cfg;
  std::unique_ptr<Clock> clock;
  std::ostream& out;
  std::ostream& err;

  fs::path snapshots() const { return cfg.workdir / "snapshots"; }
  fs::path scenes() const { return cfg.workdir / "scenes"; }
  fs::path tiles() const { return cfg.workdir / "tiles"; }
  fs::path labels() const { return cfg.workdir / "labels"; }
  fs::path splits() const { return cfg.workdir / "splits.json"; }
  fs::path training() const { return cfg.workdir / "train.jsonl"; }
  fs::path job() const { return cfg.workdir / "finetune" / "job.json"; }
  fs::path predictions(const std::string& region) const {
    return cfg.workdir / "predictions" / (region + ".jsonl");
  }

  std::vector<RegionSpec> select(const std::vector<std::string>& names) const {
    if (names.empty()) return cfg.regions;
    std::vector<RegionSpec> out;
    for (const auto& n : names) out.push_back(cfg.region(n));
    return out;
  }
};

std::uint64_t name_seed(std::uint64_t seed, std::string_view name) {
  return seed ^ std::stoull(sha256_hex(name).substr(0, 16), nullptr, 16);
}

// Returns the fixed body for every request; used to replay Overpass fixtures
// through the regular fetch path.
class CannedHttpClient final : public HttpClient {
 public:
  explicit CannedHttpClient(std::string body) : body_(std::move(body)) {}
  HttpResponse send(const HttpRequest&) override { return {200, body_, "application/json"}; }

 private:
  std::string body_;
};

// ---------------------------------------------------------------------------

void cmd_ingest(Context& ctx, const std::vector<std::string>& regions, bool force) {
  SnapshotStore store(ctx.snapshots());
  for (const auto& region : ctx.select(regions)) {
    if (!force && store.contains(region.name)) {
      ctx.out << "ingest " << region.name << ": snapshot present, skipped\n";
      continue;
    }
    Snapshot snap;
    if (!ctx.cfg.overpass.fixture_dir.empty()) {
      const fs::path fixture = ctx.cfg.overpass.fixture_dir / (region.name + ".json");
      CannedHttpClient http(read_text_file(fixture));
      snap = fetch_pv_sites(region, "file:" + fixture.filename().string(), http, *ctx.clock, ctx.cfg.overpass.tags);
    } else {
      LiveHttpClient http;
      snap = fetch_pv_sites(region, ctx.cfg.overpass.endpoint, http, *ctx.clock, ctx.cfg.overpass.tags);
    }
    store.persist(snap);
    ctx.out << "ingest " << region.name << ": " << snap.sites.size() << " sites\n";
  }
}

// Deduped sites, one scene each, enough for the region's tile target.
std::vector<PvSiteRecord> scene_sites(const Context& ctx, const RegionSpec& region) {
  SnapshotStore store(ctx.snapshots());
  if (!store.contains(region.name)) {
    throw Error(ErrorCode::IoError, "no snapshot for region '" + region.name + "'; run ingest first");
  }
  const Snapshot snap = store.load(region.name);
  const auto deduped = dedupe_sites(snap.sites, ctx.cfg.dedupe_radius_m);
  const std::size_t per_scene = kTileGrid * kTileGrid;
  const std::size_t wanted = (static_cast<std::size_t>(region.target_tile_count) + per_scene - 1) / per_scene;
  std::vector<PvSiteRecord> out;
  std::set<std::string> scene_ids;
  for (const auto& s : deduped) {
    if (out.size() == wanted) break;
    if (scene_ids.insert(scene_request_for(s).scene_id()).second) out.push_back(s);
  }
  if (out.size() < wanted) {
    ctx.err << "warning: region " << region.name << " has " << out.size() << " usable sites, " << wanted
            << " scenes wanted\n";
  }
  return out;
}

void cmd_fetch(Context& ctx, const std::vector<std::string>& regions) {
  const auto& ic = ctx.cfg.imagery;
  std::unique_ptr<HttpClient> http;
  std::unique_ptr<ImageryProvider> provider;
  std::string key;
  if (ic.provider == "static_maps") {
    key = resolve_secret(ic.key_env, "imagery provider static_maps");
    http = std::make_unique<LiveHttpClient>();
    provider = std::make_unique<StaticMapsProvider>(*http, ic.base_url);
  } else if (ic.provider == "fixture") {
    provider = std::make_unique<FixtureDirectoryProvider>(ic.fixture_dir);
  } else {
    provider = std::make_unique<SyntheticProvider>(ctx.cfg.seed);
  }
  SceneCache cache(ctx.scenes());
  TokenBucket limiter(*ctx.clock, ic.requests_per_second, std::max(1, ic.parallelism));

  for (const auto& region : ctx.select(regions)) {
    const auto sites = scene_sites(ctx, region);
    std::atomic<std::size_t> hits{0};
    std::atomic<std::size_t> done{0};
    parallel_for(sites.size(), ic.parallelism, [&](std::size_t i) {
      const auto outcome = fetch_scene(sites[i], key, *provider, cache, *ctx.clock, &limiter);
      if (outcome.cache_hit) ++hits;
      const std::size_t n = ++done;
      if (n % 50 == 0) ctx.err << "fetch " << region.name << ": " << n << "/" << sites.size() << "\n";
    });
    const double pct = sites.empty() ? 100.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(sites.size());
    char line[64];
    std::snprintf(line, sizeof line, "%.0f%%", pct);
    ctx.out << "fetch " << region.name << ": " << sites.size() << " scenes, " << hits.load() << " cache hits ("
            << line << ")\n";
  }
}

void cmd_slice(Context& ctx, const std::vector<std::string>& regions) {
  SceneCache cache(ctx.scenes());
  TileStore store = TileStore::load(ctx.tiles());
  for (const auto& region : ctx.select(regions)) {
    std::size_t count = 0;
    for (const auto& site : scene_sites(ctx, region)) {
      const std::string scene_id = scene_request_for(site).scene_id();
      const auto scene = cache.get(scene_id);
      if (!scene) throw Error(ErrorCode::IoError, "scene " + scene_id + " is not cached; run fetch first");
      for (auto& tile : slice_scene(*scene)) {
        tile.region_name = region.name;
        store.add(std::move(tile));
        ++count;
      }
    }
    ctx.out << "slice " << region.name << ": " << count << " tiles\n";
  }
  store.save(ctx.tiles());
}

std::vector<DatasetSplit> load_splits(const Context& ctx) {
  if (!fs::exists(ctx.splits())) {
    throw Error(ErrorCode::IoError, "no splits at " + ctx.splits().string() + "; run dataset export first");
  }
  return json::parse(read_text_file(ctx.splits())).get<std::vector<DatasetSplit>>();
}

void cmd_dataset_export(Context& ctx, const std::string& out_path) {
  const TileStore tiles = TileStore::load(ctx.tiles());
  const LabelStore labels(ctx.labels());
  std::vector<DatasetSplit> splits;
  for (const auto& region : ctx.cfg.regions) {
    const auto ids = tiles.tile_ids(region.name);
    splits.push_back(assign_split(ids, region, name_seed(ctx.cfg.seed, region.name),
                                  static_cast<std::size_t>(region.target_tile_count)));
  }
  check_fine_tune_exclusive(splits);
  write_file_atomic(ctx.splits(), json(splits).dump(2) + "\n");
  ctx.out << "dataset: " << splits.size() << " splits written to " << ctx.splits().string() << "\n";

  const DatasetSplit* train = nullptr;
  for (const auto& s : splits) {
    if (s.role != RegionRole::FineTune) continue;
    if (train != nullptr) throw Error(ErrorCode::ConfigError, "dataset export expects one fine-tune region");
    train = &s;
  }
  if (train == nullptr) throw Error(ErrorCode::ConfigError, "no region has role fine-tune");
  const fs::path out = out_path.empty() ? ctx.training() : fs::path(out_path);
  const auto n = export_training_jsonl(*train, labels, tiles, default_prompt_template(), out);
  ctx.out << "dataset: " << n << " training records written to " << out.string() << "\n";
}

void cmd_dataset_import(Context& ctx, const std::string& in_path) {
  const auto imported = import_annotations(in_path);
  LabelStore labels(ctx.labels());
  std::size_t inserted = 0, updated = 0, unchanged = 0;
  for (const auto& l : imported) {
    switch (labels.put(l)) {
      case LabelStore::PutResult::Inserted: ++inserted; break;
      case LabelStore::PutResult::Updated: ++updated; break;
      case LabelStore::PutResult::Unchanged: ++unchanged; break;
    }
  }
  ctx.out << "import: " << inserted << " inserted, " << updated << " updated, " << unchanged << " unchanged\n";
}

void cmd_dataset_export_labels(Context& ctx, const std::string& out_path) {
  const LabelStore labels(ctx.labels());
  const auto all = labels.all();
  write_annotations(out_path, all);
  ctx.out << "export-labels: " << all.size() << " labels written to " << out_path << "\n";
}

void cmd_annotate_serve(Context& ctx, const std::string& host, int port, const std::string& static_dir) {
  if (host != "127.0.0.1" && host != "localhost" && host != "::1") {
    throw Error(ErrorCode::UsageError, "annotate-serve binds to localhost only");
  }
  const TileStore tiles = TileStore::load(ctx.tiles());
  LabelStore labels(ctx.labels());
  AnnotationServer server(tiles, labels, *ctx.clock,
                          static_dir.empty() ? std::nullopt : std::optional<fs::path>(static_dir));
  const int bound = server.bind(host, port);
  ctx.out << "serving " << tiles.size() << " tiles on http://" << host << ":" << bound << "/" << std::endl;
  server.serve();
}

// ---------------------------------------------------------------------------

struct Backend {
  std::unique_ptr<HttpClient> http;
  std::unique_ptr<LlmBackend> llm;
};

Backend make_backend(const Context& ctx) {
  Backend b;
  const auto& lc = ctx.cfg.llm;
  if (lc.backend == "remote") {
    const std::string key = resolve_secret(lc.key_env, "llm backend remote");
    b.http = std::make_unique<LiveHttpClient>();
    b.llm = std::make_unique<OpenAiBackend>(*b.http, lc.base_url, key, ctx.cfg.workdir / "audit" / "llm.jsonl");
  } else {
    MockBackend::Options opts;
    if (!lc.fixtures.empty()) opts.fixtures = load_fixture_map(lc.fixtures);
    opts.heuristic_enabled = lc.heuristic;
    b.llm = std::make_unique<MockBackend>(std::move(opts));
  }
  return b;
}

void cmd_finetune(Context& ctx, const std::string& training_path, bool force) {
  const fs::path training = training_path.empty() ? ctx.training() : fs::path(training_path);
  if (!fs::exists(training)) throw Error(ErrorCode::IoError, "no training file at " + training.string());
  const std::string digest = sha256_hex(read_text_file(training));
  if (!force && fs::exists(ctx.job())) {
    const json prev = json::parse(read_text_file(ctx.job()), nullptr, false);
    if (!prev.is_discarded() && prev.value("status", "") == "succeeded" && prev.value("training_sha256", "") == digest) {
      ctx.out << "finetune: already succeeded, model " << prev.value("fine_tuned_model", "") << "\n";
      return;
    }
  }
  Backend backend = make_backend(ctx);
  const auto save = [&](const FineTuneJob& job) {
    ordered_json j = job_to_json(job);
    j["training_sha256"] = digest;
    j["base_model"] = ctx.cfg.finetune.base_model;
    write_file_atomic(ctx.job(), j.dump(2) + "\n");
  };
  try {
    const FineTuneJob job = upload_and_finetune(training, ctx.cfg.finetune, *backend.llm, *ctx.clock);
    save(job);
    ctx.out << "finetune: job " << job.job_id() << " succeeded, model " << *job.fine_tuned_model() << "\n";
  } catch (const FineTuneError& e) {
    save(e.job());
    throw;
  }
}

std::string model_from_job(const Context& ctx) {
  if (!fs::exists(ctx.job())) throw Error(ErrorCode::UsageError, "no fine-tuned model; run finetune or pass --model");
  const json j = json::parse(read_text_file(ctx.job()));
  const auto m = j.find("fine_tuned_model");
  if (m == j.end() || !m->is_string()) {
    throw Error(ErrorCode::UsageError, "last fine-tuning job has no model; pass --model");
  }
  return m->get<std::string>();
}

void cmd_infer(Context& ctx, const std::vector<std::string>& regions, std::string model) {
  if (model.empty()) model = model_from_job(ctx);
  const TileStore tiles = TileStore::load(ctx.tiles());
  const auto splits = load_splits(ctx);
  Backend backend = make_backend(ctx);
  const PromptTemplate tmpl = default_prompt_template();

  BatchOptions opts;
  opts.parallelism = ctx.cfg.inference.parallelism;
  opts.requests_per_second = ctx.cfg.inference.requests_per_second;
  opts.retry = ctx.cfg.finetune.retry;

  for (const auto& region : ctx.select(regions)) {
    const fs::path path = ctx.predictions(region.name);
    std::map<std::string, ordered_json> records;
    if (fs::exists(path)) {
      std::ifstream in(path, std::ios::binary);
      std::string line;
      while (std::getline(in, line)) {
        const ordered_json rec = ordered_json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.is_object() || !rec.contains("tile_id")) continue;
        records.insert_or_assign(rec["tile_id"].get<std::string>(), rec);
      }
    }
    std::vector<Tile> todo;
    std::size_t split_size = 0;
    for (const auto& split : splits) {
      if (split.region_name != region.name) continue;
      for (const auto& id : split.tile_ids) {
        ++split_size;
        auto it = records.find(id);
        if (it != records.end() && it->second["raw_text"].is_string()) continue;
        const Tile* t = tiles.find(id);
        if (t == nullptr) throw Error(ErrorCode::MissingTile, "tile '" + id + "' is not in the tile store");
        todo.push_back(*t);
      }
    }
    const auto outcomes = batch_infer(todo, model, tmpl, *backend.llm, opts, *ctx.clock);
    std::size_t failed = 0;
    for (const auto& [id, o] : outcomes) {
      if (o.ok()) {
        records.insert_or_assign(id, audit_record(id, parse_model_output(*o.raw_text)));
      } else {
        ++failed;
        PredictionError e;
        e.kind = PredictionErrorKind::NoResponse;
        e.message = o.error_message;
        records.insert_or_assign(id, audit_record(id, e));
      }
    }
    std::string text;
    for (const auto& [id, rec] : records) text += safe_dump(rec) + "\n";
    write_file_atomic(path, text);
    ctx.out << "infer " << region.name << ": " << todo.size() << " requested, " << split_size - todo.size()
            << " already done, " << failed << " without response\n";
  }
}

void cmd_evaluate(Context& ctx, std::string source, const std::string& out_path, std::string csv_path) {
  if (source.empty()) source = ctx.cfg.source_region;
  if (source.empty()) throw Error(ErrorCode::UsageError, "no source region; pass --source");
  const LabelStore labels(ctx.labels());
  std::map<std::string, std::vector<EvalPair>> per_region;
  ordered_json inputs;
  inputs["predictions"] = ordered_json::object();
  for (const auto& region : ctx.cfg.regions) {
    const fs::path path = ctx.predictions(region.name);
    if (!fs::exists(path)) continue;
    const std::string text = read_text_file(path);
    inputs["predictions"][region.name] = {{"path", fs::relative(path, ctx.cfg.workdir).generic_string()},
                                          {"sha256", sha256_hex(text)}};
    std::vector<EvalPair> pairs;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const json rec = json::parse(line, nullptr, false);
      if (rec.is_discarded() || !rec.is_object() || !rec.contains("tile_id") || !rec.contains("raw_text")) {
        throw Error(ErrorCode::ParseError, path.string() + ": not a prediction record", line_no);
      }
      const std::string id = rec["tile_id"].get<std::string>();
      auto label = labels.get(id);
      if (!label) throw Error(ErrorCode::MissingLabel, "tile '" + id + "' has a prediction but no label");
      pairs.push_back(make_eval_pair(std::move(*label), result_from_audit_record(rec), id));
    }
    per_region.emplace(region.name, std::move(pairs));
  }
  std::string label_text;
  for (const auto& l : labels.all()) label_text += annotation_record(l).dump() + "\n";
  inputs["labels_sha256"] = sha256_hex(label_text);

  const auto matrix = build_cross_domain_matrix(per_region, source, FailurePolicy::PredictedNegative,
                                                ctx.cfg.ece_bins);
  const fs::path out = out_path.empty() ? ctx.cfg.workdir / "reports" / "report.json" : fs::path(out_path);
  const fs::path csv = csv_path.empty() ? fs::path(out).replace_extension(".csv") : fs::path(csv_path);
  write_file_atomic(out, report_json(matrix, inputs).dump(2) + "\n");
  write_file_atomic(csv, report_csv(matrix));
  ctx.out << "evaluate: " << matrix.rows.size() << " regions, source " << source << "; report " << out.string()
          << ", csv " << csv.string() << "\n";
}

std::string fmt_cell(const json& v) {
  if (!v.is_number()) return "undef";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v.get<double>());
  return buf;
}

void cmd_report(Context& ctx, const std::string& in_path) {
  const json report = json::parse(read_text_file(in_path), nullptr, false);
  if (report.is_discarded() || !report.contains("rows")) {
    throw Error(ErrorCode::ParseError, in_path + " is not an evaluation report");
  }
  ctx.out << "source region: " << report.value("source_region", "") << "  (presence F1 = positive class; "
          << "failures " << report.value("failure_policy", "") << ")\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-24s %6s %7s %7s %7s %7s %7s %7s %7s %8s %7s %7s\n", "region", "n", "prec",
                "recall", "f1", "f1_mac", "acc", "loc", "qty", "dF1", "fail", "ece");
  ctx.out << line;
  for (const auto& r : report["rows"]) {
    std::snprintf(line, sizeof line, "%-24s %6zu %7s %7s %7s %7s %7s %7s %7s %8s %7s %7s\n",
                  r.value("region", "").c_str(), r.value("n", std::size_t{0}), fmt_cell(r["precision"]).c_str(),
                  fmt_cell(r["recall"]).c_str(), fmt_cell(r["f1_positive"]).c_str(),
                  fmt_cell(r["f1_macro"]).c_str(), fmt_cell(r["accuracy"]).c_str(),
                  fmt_cell(r["location_accuracy"]).c_str(), fmt_cell(r["quantity_accuracy"]).c_str(),
                  fmt_cell(r["delta_f1"]).c_str(), fmt_cell(r["parse_failure_rate"]).c_str(),
                  fmt_cell(r["ece"]).c_str());
    ctx.out << line;
  }
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::UsageError: return 2;
    case ErrorCode::ConfigError: return 3;
    default: return 1;
  }
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Rooftop PV assessment pipeline", "pv-atlas"};
  app.require_subcommand(1);

  std::string config_path = "pv-atlas.json";
  std::string workdir;
  bool fixed_clock = false;
  std::string clock_start(kDefaultClockStart);
  std::optional<std::uint64_t> seed;
  app.add_option("-c,--config", config_path, "Pipeline configuration (JSON)");
  app.add_option("--workdir", workdir, "Override the configured working directory");
  app.add_flag("--fixed-clock", fixed_clock, "Use a virtual clock (reproducible timestamps)");
  app.add_option("--clock-start", clock_start, "Start instant of the fixed clock");
  app.add_option("--seed", seed, "Override the configured seed");

  std::vector<std::string> regions;
  bool force = false;
  std::string path_a, path_b, text_a;
  std::string host = "127.0.0.1";
  int port = 8765;
  std::function<void(Context&)> action;

  auto* ingest = app.add_subcommand("ingest", "Query Overpass for PV sites per region");
  ingest->add_option("--region", regions, "Region name (repeatable; default all)");
  ingest->add_flag("--force", force, "Re-query even when a snapshot exists");
  ingest->callback([&] { action = [&](Context& c) { cmd_ingest(c, regions, force); }; });

  auto* fetch = app.add_subcommand("fetch", "Fetch satellite scenes for ingested sites");
  fetch->add_option("--region", regions, "Region name (repeatable; default all)");
  fetch->callback([&] { action = [&](Context& c) { cmd_fetch(c, regions); }; });

  auto* slice = app.add_subcommand("slice", "Slice cached scenes into 4x4 tiles");
  slice->add_option("--region", regions, "Region name (repeatable; default all)");
  slice->callback([&] { action = [&](Context& c) { cmd_slice(c, regions); }; });

  auto* dataset = app.add_subcommand("dataset", "Splits, training JSONL and annotation interchange");
  dataset->require_subcommand(1);
  auto* ds_export = dataset->add_subcommand("export", "Assign splits and write the training JSONL");
  ds_export->add_option("--out", path_a, "Training JSONL path (default <workdir>/train.jsonl)");
  ds_export->callback([&] { action = [&](Context& c) { cmd_dataset_export(c, path_a); }; });
  auto* ds_import = dataset->add_subcommand("import", "Import annotation JSONL into the label store");
  ds_import->add_option("--in", path_a, "Annotation JSONL")->required();
  ds_import->callback([&] { action = [&](Context& c) { cmd_dataset_import(c, path_a); }; });
  auto* ds_labels = dataset->add_subcommand("export-labels", "Write the label store as annotation JSONL");
  ds_labels->add_option("--out", path_a, "Output path")->required();
  ds_labels->callback([&] { action = [&](Context& c) { cmd_dataset_export_labels(c, path_a); }; });

  auto* serve = app.add_subcommand("annotate-serve", "Serve the local labeling API and UI");
  serve->add_option("--host", host, "Loopback address to bind");
  serve->add_option("--port", port, "Port (0 = any free port)");
  serve->add_option("--static", path_a, "Directory of UI assets");
  serve->callback([&] { action = [&](Context& c) { cmd_annotate_serve(c, host, port, path_a); }; });

  auto* finetune = app.add_subcommand("finetune", "Upload the training file and run a fine-tuning job");
  finetune->add_option("--training", path_a, "Training JSONL (default <workdir>/train.jsonl)");
  finetune->add_flag("--force", force, "Start a new job even if one already succeeded");
  finetune->callback([&] { action = [&](Context& c) { cmd_finetune(c, path_a, force); }; });

  auto* infer = app.add_subcommand("infer", "Run the model over every split tile");
  infer->add_option("--region", regions, "Region name (repeatable; default all)");
  infer->add_option("--model", text_a, "Model id (default: the fine-tuned model)");
  infer->callback([&] { action = [&](Context& c) { cmd_infer(c, regions, text_a); }; });

  auto* evaluate = app.add_subcommand("evaluate", "Score predictions and write the cross-domain report");
  evaluate->add_option("--source", text_a, "Source (fine-tuning) region");
  evaluate->add_option("--out", path_a, "Report JSON path (default <workdir>/reports/report.json)");
  evaluate->add_option("--csv", path_b, "CSV path (default: report path with .csv)");
  evaluate->callback([&] { action = [&](Context& c) { cmd_evaluate(c, text_a, path_a, path_b); }; });

  auto* report = app.add_subcommand("report", "Print a report as a table");
  report->add_option("--in", path_a, "Report JSON")->required();
  report->callback([&] { action = [&](Context& c) { cmd_report(c, path_a); }; });

  std::vector<const char*> argv{"pv-atlas"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    const auto extra = app.remaining();
    if (app.get_subcommands().empty() && !extra.empty()) {
      err << "UsageError: unknown subcommand '" << extra.front() << "'\n\n" << app.help();
      return 2;
    }
    err << "UsageError: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (report->parsed()) {
      Context ctx{PipelineConfig{}, std::make_unique<SystemClock>(), out, err};
      action(ctx);
      return 0;
    }
    Context ctx{load_config(config_path), nullptr, out, err};
    if (!workdir.empty()) ctx.cfg.workdir = workdir;
    if (seed) ctx.cfg.seed = *seed;
    if (fixed_clock) {
      ctx.clock = std::make_unique<ManualClock>(parse_utc(clock_start));
    } else {
      ctx.clock = std::make_unique<SystemClock>();
    }
    fs::create_directories(ctx.cfg.workdir);
    action(ctx);
    return 0;
  } catch (const Error& e) {
    err << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace pvatlas
