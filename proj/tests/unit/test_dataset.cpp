#include <doctest.h>

#include <fstream>
#include <random>
#include <set>

#include "pvatlas/core/encoding.hpp"
#include "pvatlas/core/files.hpp"
#include "pvatlas/dataset.hpp"
#include "support.hpp"

using namespace pvatlas;
namespace fs = std::filesystem;

namespace {

RegionSpec region(const std::string& name, RegionRole role) {
  RegionSpec r;
  r.name = name;
  r.bbox = {0, 0, 1, 1};
  r.role = role;
  return r;
}

std::vector<std::string> ids(int n, const std::string& prefix = "t") {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p, std::ios::binary);
  for (const auto& l : lines) out << l << "\n";
}

const char* kGood1 =
    R"({"tile_id":"a","present":true,"location":"top","quantity":"1 to 5","annotator_id":"x","labeled_at":"2024-06-01T00:00:00Z"})";
const char* kGood2 =
    R"({"tile_id":"b","present":false,"location":"NA","quantity":"NA","annotator_id":"x","labeled_at":"2024-06-01T00:00:00Z"})";

}  // namespace

TEST_CASE("label coupling") {
  CHECK_NOTHROW(validate_label(testsupport::label("a", true, LocationClass::Top, QuantityBin::TenPlus)));
  CHECK_NOTHROW(validate_label(testsupport::label("a", false)));
  TileLabel l = testsupport::label("a", true);
  l.quantity = QuantityBin::NA;
  CHECK_THROWS_AS(validate_label(l), Error);
  l = testsupport::label("a", true);
  l.location = LocationClass::NA;
  CHECK_THROWS_AS(validate_label(l), Error);
  l = testsupport::label("a", false);
  l.location = LocationClass::Left;
  try {
    validate_label(l);
    FAIL("accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InconsistentLabel);
  }
}

TEST_CASE("quantity bins for counts") {
  CHECK(quantity_bin_for_count(0) == QuantityBin::NA);
  CHECK(quantity_bin_for_count(0.5) == QuantityBin::ZeroToOne);
  CHECK(quantity_bin_for_count(1) == QuantityBin::ZeroToOne);
  CHECK(quantity_bin_for_count(1.01) == QuantityBin::OneToFive);
  CHECK(quantity_bin_for_count(5) == QuantityBin::OneToFive);
  CHECK(quantity_bin_for_count(10) == QuantityBin::FiveToTen);
  CHECK(quantity_bin_for_count(11) == QuantityBin::TenPlus);
}

TEST_CASE("split assignment matches a reference shuffle") {
  const auto all = ids(50);
  const RegionSpec r = region("santa-ana", RegionRole::FineTune);
  const DatasetSplit s = assign_split(all, r, 42, 20);

  // Reference: Fisher-Yates from the back with rejection-sampled indices.
  std::vector<std::string> ref = all;
  std::mt19937_64 rng(42);
  for (std::size_t i = ref.size(); i > 1; --i) {
    // reject the lowest 2^64 mod i values so every residue is equally likely
    const std::uint64_t threshold = (0 - static_cast<std::uint64_t>(i)) % i;
    std::uint64_t x = rng();
    while (x < threshold) x = rng();
    std::swap(ref[i - 1], ref[x % i]);
  }
  ref.resize(20);
  CHECK(s.tile_ids == ref);

  CHECK(s.name == "santa-ana-fine-tune");
  CHECK(s.role == RegionRole::FineTune);
  CHECK(s.region_name == "santa-ana");
  CHECK(std::set<std::string>(s.tile_ids.begin(), s.tile_ids.end()).size() == 20);
  CHECK(assign_split(all, r, 42, 20).tile_ids == s.tile_ids);
  CHECK(assign_split(all, r, 43, 20).tile_ids != s.tile_ids);
  CHECK(assign_split(all, r, 42, 50).tile_ids.size() == 50);

  try {
    assign_split(all, r, 42, 51);
    FAIL("cap above input accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InsufficientTiles);
  }
  std::vector<std::string> dup{"a", "b", "a"};
  CHECK_THROWS_AS(assign_split(dup, r, 1, 2), Error);

  const nlohmann::json j = s;
  CHECK(j.get<DatasetSplit>().tile_ids == s.tile_ids);
}

TEST_CASE("fine-tune exclusivity") {
  DatasetSplit a = assign_split(ids(10), region("a", RegionRole::FineTune), 1, 5);
  DatasetSplit b = assign_split(ids(10), region("b", RegionRole::FineTune), 2, 5);
  DatasetSplit c = assign_split(ids(10), region("c", RegionRole::CrossRegionalTest), 3, 10);
  const std::vector<DatasetSplit> ok{a, c};
  CHECK_NOTHROW(check_fine_tune_exclusive(ok));
  b.tile_ids = {a.tile_ids[0]};
  const std::vector<DatasetSplit> clash{a, b};
  CHECK_THROWS_AS(check_fine_tune_exclusive(clash), Error);
}

TEST_CASE("annotation import reports the offending line") {
  testsupport::TempDir dir;
  const fs::path p = dir / "labels.jsonl";

  write_lines(p, {kGood1, kGood2});
  const auto labels = import_annotations(p);
  REQUIRE(labels.size() == 2);
  CHECK(labels[0].location == LocationClass::Top);
  CHECK(labels[1].present == false);
  CHECK(format_utc(labels[0].labeled_at) == "2024-06-01T00:00:00Z");

  write_lines(p, {kGood1,
                  R"({"tile_id":"c","present":true,"location":"middle","quantity":"1 to 5","annotator_id":"x","labeled_at":"2024-06-01T00:00:00Z"})"});
  try {
    import_annotations(p);
    FAIL("unknown location accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ParseError);
    CHECK(e.line() == 2);
  }

  write_lines(p, {kGood1, kGood2,
                  R"({"tile_id":"c","present":false,"location":"top","quantity":"NA","annotator_id":"x","labeled_at":"2024-06-01T00:00:00Z"})"});
  try {
    import_annotations(p);
    FAIL("coupling violation accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InconsistentLabel);
    CHECK(e.line() == 3);
  }

  write_lines(p, {kGood1, "", "{not json"});
  try {
    import_annotations(p);
    FAIL("garbage accepted");
  } catch (const Error& e) {
    CHECK(e.line() == 3);
  }

  write_annotations(p, labels);
  CHECK(import_annotations(p) == labels);
}

TEST_CASE("label store is idempotent and survives reload") {
  testsupport::TempDir dir;
  {
    LabelStore store(dir.path());
    CHECK(store.put(testsupport::label("a", true)) == LabelStore::PutResult::Inserted);
    CHECK(store.put(testsupport::label("a", true)) == LabelStore::PutResult::Unchanged);
    CHECK(store.put(testsupport::label("a", false)) == LabelStore::PutResult::Updated);
    CHECK(store.put(testsupport::label("b", true, LocationClass::Left, QuantityBin::FiveToTen)) ==
          LabelStore::PutResult::Inserted);
    TileLabel bad = testsupport::label("c", false);
    bad.quantity = QuantityBin::TenPlus;
    CHECK_THROWS_AS(store.put(bad), Error);
    CHECK(store.size() == 2);
  }
  LabelStore reopened(dir.path());
  CHECK(reopened.size() == 2);
  CHECK(reopened.get("a") == testsupport::label("a", false));
  CHECK(reopened.get("b")->location == LocationClass::Left);
  CHECK_FALSE(reopened.contains("c"));
  CHECK(reopened.all().front().tile_id == "a");
}

TEST_CASE("label store drops a torn final append") {
  testsupport::TempDir dir;
  {
    LabelStore store(dir.path());
    store.put(testsupport::label("a", true));
    store.put(testsupport::label("b", false));
  }
  {
    std::ofstream out(dir / "labels.jsonl", std::ios::app | std::ios::binary);
    out << R"({"tile_id":"c","pres)";
  }
  LabelStore reopened(dir.path());
  CHECK(reopened.size() == 2);
  CHECK(read_text_file(dir / "labels.jsonl").find("\"c\"") == std::string::npos);

  // corruption in the middle is an error
  write_lines(dir / "labels.jsonl", {kGood1, "{broken", kGood2});
  CHECK_THROWS_AS(LabelStore(dir.path()), Error);
}

TEST_CASE("training export round trips through the parser") {
  testsupport::TempDir dir;
  TileStore tiles;
  LabelStore labels;
  std::vector<std::string> all;
  for (int i = 0; i < 8; ++i) {
    Tile t;
    t.tile_id = "s_r0c" + std::to_string(i);
    t.scene_id = "s";
    t.col = i;
    t.region_name = "santa-ana";
    t.pixels = RgbRaster(100, 100, {static_cast<std::uint8_t>(i * 20), 10, 10});
    all.push_back(t.tile_id);
    tiles.add(std::move(t));
    labels.put(i % 2 == 0 ? testsupport::label(all.back(), true, LocationClass::BottomRight, QuantityBin::TenPlus)
                          : testsupport::label(all.back(), false));
  }
  const DatasetSplit split = assign_split(all, region("santa-ana", RegionRole::FineTune), 5, 8);
  const PromptTemplate tmpl = default_prompt_template();
  const fs::path out = dir / "train.jsonl";
  CHECK(export_training_jsonl(split, labels, tiles, tmpl, out) == 8);

  const auto targets = read_training_targets(out);
  REQUIRE(targets.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    const TileLabel l = *labels.get(split.tile_ids[i]);
    CHECK(targets[i].present == l.present);
    CHECK(targets[i].location == l.location);
    CHECK(targets[i].quantity == l.quantity);
    CHECK(targets[i].parse_path == ParsePath::Strict);
  }

  std::ifstream in(out);
  std::string first;
  std::getline(in, first);
  const auto rec = nlohmann::json::parse(first);
  REQUIRE(rec["messages"].size() == 3);
  CHECK(rec["messages"][0]["content"] == build_system_prompt(tmpl));
  const std::string url = rec["messages"][1]["content"][1]["image_url"]["url"];
  CHECK(decode_png(base64_decode(url.substr(std::string("data:image/png;base64,").size()))) ==
        tiles.find(split.tile_ids[0])->pixels);

  LabelStore partial;
  partial.put(testsupport::label(all[0], false));
  try {
    export_training_jsonl(split, partial, tiles, tmpl, dir / "x.jsonl");
    FAIL("missing label accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingLabel);
  }
}
