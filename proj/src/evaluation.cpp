#include "pvatlas/evaluation.hpp"

#include <cmath>

#include "pvatlas/core/error.hpp"
#include "pvatlas/core/files.hpp"

using nlohmann::ordered_json;

namespace pvatlas {

EvalPair make_eval_pair(TileLabel truth, ParseResult prediction, std::string_view prediction_tile_id) {
  if (truth.tile_id != prediction_tile_id) {
    throw Error(ErrorCode::InvalidArgument, "label '" + truth.tile_id + "' paired with prediction for '" +
                                                std::string(prediction_tile_id) + "'");
  }
  std::string id = truth.tile_id;
  return EvalPair{std::move(id), std::move(truth), std::move(prediction)};
}

std::string_view failure_policy_name(FailurePolicy policy) {
  switch (policy) {
    case FailurePolicy::PredictedNegative: return "predicted_negative";
    case FailurePolicy::PredictedPositive: return "predicted_positive";
    case FailurePolicy::Exclude: return "exclude";
  }
  return "unknown";
}

namespace {

void require_nonempty(std::span<const EvalPair> pairs, std::string_view what) {
  if (pairs.empty()) throw Error(ErrorCode::EmptyInput, std::string(what) + " needs at least one pair");
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::optional<double> harmonic(std::optional<double> p, std::optional<double> r) {
  if (!p || !r || *p + *r == 0.0) return std::nullopt;
  return 2.0 * *p * *r / (*p + *r);
}

}  // namespace

ConfusionCounts compute_confusion(std::span<const EvalPair> pairs, FailurePolicy policy) {
  require_nonempty(pairs, "compute_confusion");
  ConfusionCounts c;
  for (const auto& p : pairs) {
    bool predicted;
    if (const auto* pred = p.prediction.if_prediction()) {
      predicted = pred->present;
    } else {
      ++c.parse_failures;
      if (policy == FailurePolicy::Exclude) continue;
      predicted = policy == FailurePolicy::PredictedPositive;
    }
    const bool actual = p.truth.present;
    if (actual && predicted) ++c.tp;
    else if (!actual && predicted) ++c.fp;
    else if (actual) ++c.fn;
    else ++c.tn;
  }
  return c;
}

TaskMetrics compute_task_metrics(const ConfusionCounts& c) {
  TaskMetrics m;
  m.n = c.scored();
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  m.f1 = harmonic(m.precision, m.recall);
  m.accuracy = ratio(c.tp + c.tn, m.n);
  if (!m.precision) m.degenerate_flags.emplace(kNoPredictedPositives);
  if (!m.recall) m.degenerate_flags.emplace(kNoActualPositives);
  if (!m.f1) m.degenerate_flags.emplace(kF1Undefined);
  if (!m.accuracy) m.degenerate_flags.emplace(kNoScoredPairs);
  return m;
}

double exact_match_accuracy(std::span<const EvalPair> pairs, CategoricalField field) {
  require_nonempty(pairs, "exact_match_accuracy");
  std::size_t hits = 0;
  for (const auto& p : pairs) {
    const auto* pred = p.prediction.if_prediction();
    if (pred == nullptr) continue;
    hits += field == CategoricalField::Location ? pred->location == p.truth.location
                                                : pred->quantity == p.truth.quantity;
  }
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

PerClassF1 per_class_f1(std::span<const EvalPair> pairs, FailurePolicy policy) {
  const ConfusionCounts c = compute_confusion(pairs, policy);
  ConfusionCounts flipped;
  flipped.tp = c.tn;
  flipped.tn = c.tp;
  flipped.fp = c.fn;
  flipped.fn = c.fp;
  PerClassF1 out;
  out.solar_f1 = compute_task_metrics(c).f1;
  out.no_solar_f1 = compute_task_metrics(flipped).f1;
  if (out.solar_f1 && out.no_solar_f1) out.macro_f1 = (*out.solar_f1 + *out.no_solar_f1) / 2.0;
  return out;
}

double delta_f1(double target_f1, double source_f1) {
  const auto in_range = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_range(target_f1) || !in_range(source_f1)) {
    throw Error(ErrorCode::InputOutOfRange, "F1 values must lie in [0, 1], got target " +
                                                format_double(target_f1) + ", source " + format_double(source_f1));
  }
  return target_f1 - source_f1;
}

Calibration expected_calibration_error(std::span<const EvalPair> pairs, int bins) {
  if (bins < 1) throw Error(ErrorCode::InvalidArgument, "bins must be >= 1");
  struct Acc {
    std::size_t count = 0, positives = 0;
    double sum_likelihood = 0;
  };
  std::vector<Acc> acc(static_cast<std::size_t>(bins));
  std::size_t n = 0;
  for (const auto& p : pairs) {
    const auto* pred = p.prediction.if_prediction();
    if (pred == nullptr) continue;
    const double l = pred->likelihood;
    auto b = static_cast<std::size_t>(std::floor(l * bins));
    if (b >= acc.size()) b = acc.size() - 1;
    ++acc[b].count;
    acc[b].positives += p.truth.present;
    acc[b].sum_likelihood += l;
    ++n;
  }
  if (n == 0) throw Error(ErrorCode::NoParsedPredictions, "no parsed predictions to calibrate");

  Calibration out;
  out.n = n;
  for (int b = 0; b < bins; ++b) {
    const Acc& a = acc[static_cast<std::size_t>(b)];
    ReliabilityBin rb;
    rb.lower = static_cast<double>(b) / bins;
    rb.upper = static_cast<double>(b + 1) / bins;
    rb.count = a.count;
    if (a.count > 0) {
      rb.mean_likelihood = a.sum_likelihood / static_cast<double>(a.count);
      rb.accuracy = static_cast<double>(a.positives) / static_cast<double>(a.count);
      out.ece += static_cast<double>(a.count) / static_cast<double>(n) *
                 std::abs(*rb.accuracy - *rb.mean_likelihood);
    }
    out.reliability.push_back(rb);
  }
  return out;
}

CrossDomainMatrix build_cross_domain_matrix(const std::map<std::string, std::vector<EvalPair>>& per_region_pairs,
                                            const std::string& source_region, FailurePolicy policy,
                                            int ece_bins) {
  if (per_region_pairs.count(source_region) == 0) {
    throw Error(ErrorCode::MissingSourceRegion, "source region '" + source_region + "' has no pairs");
  }
  CrossDomainMatrix m;
  m.source_region = source_region;
  m.policy = policy;
  m.ece_bins = ece_bins;
  for (const auto& [region, pairs] : per_region_pairs) {
    if (pairs.empty()) throw Error(ErrorCode::EmptyInput, "region '" + region + "' has no pairs");
    RegionRow row;
    row.region = region;
    row.n = pairs.size();
    row.counts = compute_confusion(pairs, policy);
    row.presence = compute_task_metrics(row.counts);
    row.per_class = per_class_f1(pairs, policy);
    row.location_accuracy = exact_match_accuracy(pairs, CategoricalField::Location);
    row.quantity_accuracy = exact_match_accuracy(pairs, CategoricalField::Quantity);
    row.parse_failure_rate = static_cast<double>(row.counts.parse_failures) / static_cast<double>(pairs.size());
    try {
      row.calibration = expected_calibration_error(pairs, ece_bins);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoParsedPredictions) throw;
    }
    m.rows.emplace(region, std::move(row));
  }
  const auto& source_f1 = m.rows.at(source_region).presence.f1;
  for (auto& [region, row] : m.rows) {
    if (region == source_region) {
      row.delta_f1 = 0.0;
    } else if (row.presence.f1 && source_f1) {
      row.delta_f1 = delta_f1(*row.presence.f1, *source_f1);
    }
  }
  return m;
}

namespace {

ordered_json opt(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(); }

std::string csv_cell(const std::optional<double>& v) { return v ? format_double(*v) : "undefined"; }

}  // namespace

ordered_json report_json(const CrossDomainMatrix& m, const ordered_json& inputs) {
  ordered_json j;
  j["source_region"] = m.source_region;
  j["failure_policy"] = std::string(failure_policy_name(m.policy));
  j["presence_f1_convention"] = "positive_class";
  j["ece_bins"] = m.ece_bins;
  j["inputs"] = inputs;
  ordered_json rows = ordered_json::array();
  for (const auto& [region, r] : m.rows) {
    ordered_json row;
    row["region"] = region;
    row["is_source"] = region == m.source_region;
    row["n"] = r.n;
    row["confusion"] = {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}, {"tn", r.counts.tn}};
    row["precision"] = opt(r.presence.precision);
    row["recall"] = opt(r.presence.recall);
    row["f1_positive"] = opt(r.presence.f1);
    row["f1_no_solar"] = opt(r.per_class.no_solar_f1);
    row["f1_macro"] = opt(r.per_class.macro_f1);
    row["accuracy"] = opt(r.presence.accuracy);
    row["degenerate_flags"] = ordered_json(std::vector<std::string>(r.presence.degenerate_flags.begin(),
                                                                     r.presence.degenerate_flags.end()));
    row["location_accuracy"] = r.location_accuracy;
    row["quantity_accuracy"] = r.quantity_accuracy;
    row["delta_f1"] = opt(r.delta_f1);
    row["parse_failures"] = r.counts.parse_failures;
    row["parse_failure_rate"] = r.parse_failure_rate;
    if (r.calibration) {
      row["ece"] = r.calibration->ece;
      ordered_json bins = ordered_json::array();
      for (const auto& b : r.calibration->reliability) {
        bins.push_back({{"lower", b.lower},
                        {"upper", b.upper},
                        {"mean_likelihood", opt(b.mean_likelihood)},
                        {"accuracy", opt(b.accuracy)},
                        {"count", b.count}});
      }
      row["reliability"] = std::move(bins);
    } else {
      row["ece"] = nullptr;
      row["reliability"] = ordered_json::array();
    }
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  return j;
}

std::string report_csv(const CrossDomainMatrix& m) {
  std::string out =
      "region,n,precision,recall,f1_positive,f1_macro,accuracy,loc_acc,qty_acc,delta_f1,parse_fail_rate,ece\n";
  for (const auto& [region, r] : m.rows) {
    out += region + "," + std::to_string(r.n) + "," + csv_cell(r.presence.precision) + "," +
           csv_cell(r.presence.recall) + "," + csv_cell(r.presence.f1) + "," + csv_cell(r.per_class.macro_f1) +
           "," + csv_cell(r.presence.accuracy) + "," + format_double(r.location_accuracy) + "," +
           format_double(r.quantity_accuracy) + "," + csv_cell(r.delta_f1) + "," +
           format_double(r.parse_failure_rate) + "," +
           csv_cell(r.calibration ? std::optional<double>(r.calibration->ece) : std::nullopt) + "\n";
  }
  return out;
}

}  // namespace pvatlas
