#include "dfd/metrics.hpp"

#include "dfd/archive.hpp"
#include "dfd/config_fields.hpp"
#include "dfd/csv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace dfd {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_inputs(const std::vector<ScoredPrediction>& preds) {
  if (preds.empty()) throw std::invalid_argument("evaluate: no predictions");
  for (const auto& p : preds) {
    if (!(p.score >= 0.0 && p.score <= 1.0)) {
      throw std::invalid_argument("evaluate: score " + format_number(p.score) + " for '" + p.id + "' is outside [0, 1]");
    }
  }
}

}  // namespace

EvalReport evaluate(const std::vector<ScoredPrediction>& preds, double threshold) {
  check_inputs(preds);
  EvalReport r;
  r.threshold = threshold;
  for (const auto& p : preds) {
    const bool fake = p.label == Label::fake;
    const bool predicted_fake = p.score >= threshold;
    (fake ? r.n_fake : r.n_real) += 1;
    if (fake && predicted_fake) ++r.confusion.tp;
    if (fake && !predicted_fake) ++r.confusion.fn;
    if (!fake && predicted_fake) ++r.confusion.fp;
    if (!fake && !predicted_fake) ++r.confusion.tn;
  }
  r.accuracy = static_cast<double>(r.confusion.tp + r.confusion.tn) / static_cast<double>(preds.size());
  if (r.n_fake == 0 || r.n_real == 0) return r;

  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return preds[a].score > preds[b].score; });

  const double nf = static_cast<double>(r.n_fake), nr = static_cast<double>(r.n_real);
  r.roc.push_back({0.0, 0.0, kInf});
  r.pr.push_back({0.0, 1.0, kInf});
  double tp = 0, fp = 0, auc = 0, ap = 0, best_recall_at_p1 = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = preds[order[i]].score;
    for (; i < order.size() && preds[order[i]].score == s; ++i) {
      (preds[order[i]].label == Label::fake ? tp : fp) += 1;
    }
    const RocPoint prev = r.roc.back();
    const RocPoint cur{fp / nr, tp / nf, s};
    auc += (cur.fpr - prev.fpr) * (cur.tpr + prev.tpr) / 2.0;
    r.roc.push_back(cur);

    const double recall = tp / nf, precision = tp / (tp + fp);
    ap += (recall - r.pr.back().recall) * precision;
    if (precision == 1.0) best_recall_at_p1 = std::max(best_recall_at_p1, recall);
    r.pr.push_back({recall, precision, s});
  }
  r.roc_auc = auc;
  r.average_precision = ap;
  r.recall_at_precision_1 = best_recall_at_p1;
  return r;
}

std::string to_string(MetricKind m) {
  switch (m) {
    case MetricKind::accuracy: return "accuracy";
    case MetricKind::roc_auc: return "roc_auc";
    case MetricKind::average_precision: return "average_precision";
  }
  return "?";
}

MetricKind parse_metric(const std::string& s) {
  for (auto m : {MetricKind::accuracy, MetricKind::roc_auc, MetricKind::average_precision}) {
    if (to_string(m) == s) return m;
  }
  throw ValidationError("unknown metric '" + s + "'");
}

Interval bootstrap_ci(const std::vector<ScoredPrediction>& preds, MetricKind metric, int n_resamples, std::uint64_t seed,
                      double threshold) {
  check_inputs(preds);
  if (n_resamples < 100) throw std::invalid_argument("bootstrap_ci: n_resamples must be >= 100");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, preds.size() - 1);
  std::vector<ScoredPrediction> sample(preds.size());
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(n_resamples));
  for (int b = 0; b < n_resamples; ++b) {
    for (int attempt = 0;; ++attempt) {
      for (auto& s : sample) s = preds[pick(rng)];
      const EvalReport r = evaluate(sample, threshold);
      std::optional<double> v;
      switch (metric) {
        case MetricKind::accuracy: v = r.accuracy; break;
        case MetricKind::roc_auc: v = r.roc_auc; break;
        case MetricKind::average_precision: v = r.average_precision; break;
      }
      if (v) {
        values.push_back(*v);
        break;
      }
      if (attempt == 99) throw std::runtime_error("bootstrap_ci: 100 consecutive single-class resamples");
    }
  }
  std::sort(values.begin(), values.end());
  // Linear interpolation between order statistics.
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  return {quantile(0.025), quantile(0.975)};
}

nlohmann::json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  return {{"accuracy", r.accuracy},
          {"threshold", r.threshold},
          {"confusion", {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"tn", r.confusion.tn}, {"fn", r.confusion.fn}}},
          {"roc_auc", opt(r.roc_auc)},
          {"average_precision", opt(r.average_precision)},
          {"recall_at_precision_1", opt(r.recall_at_precision_1)},
          {"n_real", r.n_real},
          {"n_fake", r.n_fake},
          {"roc_points", r.roc.size()},
          {"pr_points", r.pr.size()}};
}

void write_predictions_csv(const std::vector<ScoredPrediction>& preds, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "id,score,label\n";
  for (const auto& p : preds) out << csv_field(p.id) << ',' << format_number(p.score) << ',' << to_string(p.label) << '\n';
  write_file_atomic(path, out.str());
}

std::vector<ScoredPrediction> read_predictions_csv(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || parse_csv_line(line) != std::vector<std::string>{"id", "score", "label"}) {
    throw ValidationError(path.string() + ": expected header id,score,label");
  }
  std::vector<ScoredPrediction> out;
  for (int row = 2; std::getline(in, line); ++row) {
    if (line.empty() || line == "\r") continue;
    const auto f = parse_csv_line(line);
    if (f.size() != 3) throw ValidationError(path.string() + ": row " + std::to_string(row) + " needs 3 fields");
    try {
      out.push_back({f[0], std::stod(f[1]), parse_label(f[2])});
    } catch (const std::logic_error&) {
      throw ValidationError(path.string() + ": row " + std::to_string(row) + " has a bad score '" + f[1] + "'");
    }
  }
  return out;
}

void write_eval_outputs(const EvalReport& r, const std::filesystem::path& dir, const nlohmann::json& extra) {
  nlohmann::json j = to_json(r);
  for (const auto& [k, v] : extra.items()) j[k] = v;
  write_file_atomic(dir / "eval.json", j.dump(2) + "\n");

  std::ostringstream roc;
  roc << "fpr,tpr,threshold\n";
  for (const auto& p : r.roc) roc << format_number(p.fpr) << ',' << format_number(p.tpr) << ',' << format_number(p.threshold) << '\n';
  write_file_atomic(dir / "roc.csv", roc.str());

  std::ostringstream pr;
  pr << "recall,precision,threshold\n";
  for (const auto& p : r.pr) pr << format_number(p.recall) << ',' << format_number(p.precision) << ',' << format_number(p.threshold) << '\n';
  write_file_atomic(dir / "pr.csv", pr.str());
}

}  // namespace dfd
