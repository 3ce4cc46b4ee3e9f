#pragma once

// Independent reference computations. None of these call into the library
// code they check.

#include "dfd/metrics.hpp"
#include "dfd/schedule.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

namespace dfd::oracle {

/// Rank-statistic ROC AUC: concordant fake/real pairs, ties worth half.
inline double auc(const std::vector<ScoredPrediction>& preds) {
  double num = 0.0;
  long pairs = 0;
  for (const auto& f : preds) {
    if (f.label != Label::fake) continue;
    for (const auto& r : preds) {
      if (r.label != Label::real) continue;
      ++pairs;
      if (f.score > r.score) num += 1.0;
      else if (f.score == r.score) num += 0.5;
    }
  }
  return num / static_cast<double>(pairs);
}

/// Mean over positives of the precision at that positive's score, counting
/// every prediction scored at least as high.
inline double average_precision(const std::vector<ScoredPrediction>& preds) {
  double sum = 0.0;
  long positives = 0;
  for (const auto& p : preds) {
    if (p.label != Label::fake) continue;
    ++positives;
    long above = 0, tp = 0;
    for (const auto& q : preds) {
      if (q.score >= p.score) {
        ++above;
        tp += q.label == Label::fake;
      }
    }
    sum += static_cast<double>(tp) / static_cast<double>(above);
  }
  return sum / static_cast<double>(positives);
}

/// Largest recall among thresholds with no false positives.
inline double recall_at_zero_fp(const std::vector<ScoredPrediction>& preds) {
  double best = 0.0;
  long positives = 0;
  for (const auto& p : preds) positives += p.label == Label::fake;
  for (const auto& p : preds) {
    long tp = 0, fp = 0;
    for (const auto& q : preds) {
      if (q.score >= p.score) (q.label == Label::fake ? tp : fp)++;
    }
    if (fp == 0) best = std::max(best, static_cast<double>(tp) / static_cast<double>(positives));
  }
  return best;
}

inline double accuracy(const std::vector<ScoredPrediction>& preds, double threshold) {
  long correct = 0;
  for (const auto& p : preds) correct += (p.score >= threshold) == (p.label == Label::fake);
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

/// Epoch-by-epoch replay: multiply by the factor at each period boundary.
inline std::vector<double> step_sequence(double lr0, double factor, int period, int epochs) {
  std::vector<double> out;
  double lr = lr0;
  for (int e = 0; e < epochs; ++e) {
    if (e > 0 && e % period == 0) lr *= factor;
    out.push_back(lr);
  }
  return out;
}

/// Epoch-by-epoch replay with a running cycle counter, restarting when the
/// counter reaches the current cycle length.
inline std::vector<double> cosine_sequence(double lr0, double eta_min, int t0, int t_mult, int epochs) {
  std::vector<double> out;
  long t_cur = 0, t_i = t0;
  for (int e = 0; e < epochs; ++e) {
    out.push_back(eta_min + (lr0 - eta_min) * (1.0 + std::cos(std::numbers::pi * t_cur / t_i)) / 2.0);
    if (++t_cur >= t_i) {
      t_cur -= t_i;
      t_i *= t_mult;
    }
  }
  return out;
}

struct StopTrace {
  std::optional<int> stop_epoch;
  int best_epoch = -1;
};

/// First epoch whose distance from the latest strict maximum reaches patience.
inline StopTrace early_stop(const std::vector<double>& metrics, int patience) {
  StopTrace t;
  double best = -INFINITY;
  for (int e = 0; e < static_cast<int>(metrics.size()); ++e) {
    if (metrics[e] > best) {
      best = metrics[e];
      t.best_epoch = e;
    }
    if (e - t.best_epoch == patience) {
      t.stop_epoch = e;
      break;
    }
  }
  return t;
}

}  // namespace dfd::oracle
