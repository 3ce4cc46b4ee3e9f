#pragma once

#include "dfd/types.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dfd {

struct ScoredPrediction {
  std::string id;
  double score = 0.0;  // probability of "fake"
  Label label = Label::real;
};

struct Confusion {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;  // fake is the positive class
};

struct RocPoint {
  double fpr, tpr, threshold;
};
struct PrPoint {
  double recall, precision, threshold;
};

/// Curves are built by sweeping distinct scores in descending order, so
/// predictions sharing a score enter together. Both curves start at the
/// +inf threshold. ROC/PR fields are empty when only one class is present.
struct EvalReport {
  double accuracy = 0.0;
  double threshold = 0.5;
  Confusion confusion;
  std::vector<RocPoint> roc;
  std::optional<double> roc_auc;
  std::vector<PrPoint> pr;
  std::optional<double> average_precision;
  std::optional<double> recall_at_precision_1;
  std::int64_t n_real = 0, n_fake = 0;
};

/// Hard prediction is "fake" when score >= threshold.
/// Throws std::invalid_argument on empty input or scores outside [0, 1].
EvalReport evaluate(const std::vector<ScoredPrediction>& preds, double threshold = 0.5);

enum class MetricKind { accuracy, roc_auc, average_precision };
std::string to_string(MetricKind m);
MetricKind parse_metric(const std::string& s);

struct Interval {
  double low, high;
};

/// Percentile bootstrap 95% interval. Resamples lacking a class needed by the
/// metric are redrawn, up to 100 times each.
Interval bootstrap_ci(const std::vector<ScoredPrediction>& preds, MetricKind metric, int n_resamples, std::uint64_t seed,
                      double threshold = 0.5);

nlohmann::json to_json(const EvalReport& r);

void write_predictions_csv(const std::vector<ScoredPrediction>& preds, const std::filesystem::path& path);
std::vector<ScoredPrediction> read_predictions_csv(const std::filesystem::path& path);

/// Writes eval.json, roc.csv and pr.csv into `dir`.
void write_eval_outputs(const EvalReport& r, const std::filesystem::path& dir,
                        const nlohmann::json& extra = nlohmann::json::object());

}  // namespace dfd
