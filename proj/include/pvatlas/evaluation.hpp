#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pvatlas/prompting.hpp"
#include "pvatlas/schema.hpp"

namespace pvatlas {

struct EvalPair {
  std::string tile_id;
  TileLabel truth;
  ParseResult prediction;
};

/// Pairs a label with a prediction; throws Error{InvalidArgument} when the
/// ids disagree.
EvalPair make_eval_pair(TileLabel truth, ParseResult prediction, std::string_view prediction_tile_id);

/// How presence scoring treats pairs without a parsed prediction.
enum class FailurePolicy { PredictedNegative, PredictedPositive, Exclude };
std::string_view failure_policy_name(FailurePolicy policy);

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::size_t parse_failures = 0;  // tallied whatever the policy

  std::size_t scored() const { return tp + fp + fn + tn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Presence confusion counts. Throws Error{EmptyInput}.
ConfusionCounts compute_confusion(std::span<const EvalPair> pairs,
                                  FailurePolicy policy = FailurePolicy::PredictedNegative);

// Degenerate-case flags.
inline constexpr std::string_view kNoPredictedPositives = "no_predicted_positives";  // precision 0/0
inline constexpr std::string_view kNoActualPositives = "no_actual_positives";        // recall 0/0
inline constexpr std::string_view kF1Undefined = "f1_undefined";
inline constexpr std::string_view kNoScoredPairs = "no_scored_pairs";                 // accuracy 0/0

/// nullopt means Undefined (a zero denominator), never a silent 0 or 1.
struct TaskMetrics {
  std::optional<double> precision, recall, f1, accuracy;
  std::size_t n = 0;
  std::set<std::string, std::less<>> degenerate_flags;
};

TaskMetrics compute_task_metrics(const ConfusionCounts& counts);

enum class CategoricalField { Location, Quantity };

/// NA is a class; pairs without a parsed prediction count as misses.
/// Throws Error{EmptyInput}.
double exact_match_accuracy(std::span<const EvalPair> pairs, CategoricalField field);

struct PerClassF1 {
  std::optional<double> solar_f1;
  std::optional<double> no_solar_f1;
  std::optional<double> macro_f1;  // mean of the two when both are defined
};

/// Throws Error{EmptyInput}.
PerClassF1 per_class_f1(std::span<const EvalPair> pairs,
                        FailurePolicy policy = FailurePolicy::PredictedNegative);

/// target - source. Throws Error{InputOutOfRange} outside [0, 1].
double delta_f1(double target_f1, double source_f1);

struct ReliabilityBin {
  double lower = 0, upper = 0;
  std::optional<double> mean_likelihood;
  std::optional<double> accuracy;
  std::size_t count = 0;
};

struct Calibration {
  double ece = 0;
  std::size_t n = 0;
  std::vector<ReliabilityBin> reliability;
};

/// Equal-width bins over the likelihood field of parsed predictions. The
/// likelihood is a stated probability of presence, so a bin's empirical
/// accuracy is the fraction of its tiles whose label is present. Empty bins
/// contribute nothing. Throws Error{NoParsedPredictions},
/// Error{InvalidArgument} for bins < 1.
Calibration expected_calibration_error(std::span<const EvalPair> pairs, int bins = 10);

struct RegionRow {
  std::string region;
  std::size_t n = 0;
  ConfusionCounts counts;
  TaskMetrics presence;  // positive (solar) class
  PerClassF1 per_class;
  double location_accuracy = 0;
  double quantity_accuracy = 0;
  std::optional<double> delta_f1;  // presence F1 vs the source row
  double parse_failure_rate = 0;
  std::optional<Calibration> calibration;
};

struct CrossDomainMatrix {
  std::string source_region;
  FailurePolicy policy = FailurePolicy::PredictedNegative;
  int ece_bins = 10;
  std::map<std::string, RegionRow> rows;
};

/// Throws Error{MissingSourceRegion}, Error{EmptyInput} for a region
/// without pairs.
CrossDomainMatrix build_cross_domain_matrix(
    const std::map<std::string, std::vector<EvalPair>>& per_region_pairs, const std::string& source_region,
    FailurePolicy policy = FailurePolicy::PredictedNegative, int ece_bins = 10);

/// Full report: matrix, flags, and `inputs` (caller-supplied provenance).
nlohmann::ordered_json report_json(const CrossDomainMatrix& matrix, const nlohmann::ordered_json& inputs);

/// One row per region. Undefined values are written as "undefined".
std::string report_csv(const CrossDomainMatrix& matrix);

}  // namespace pvatlas
