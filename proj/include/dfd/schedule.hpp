#pragma once

#include <optional>
#include <variant>

namespace dfd {

/// lr0 * factor^floor(epoch / period)
struct StepDecaySchedule {
  double lr0 = 1e-3;
  double factor = 0.5;
  int period = 2;

  void validate() const;
};

/// Cosine annealing with warm restarts. Cycle i has length T0 * Tmult^i;
/// within a cycle at elapsed t the rate is
///   eta_min + (lr0 - eta_min) * (1 + cos(pi * t / T_i)) / 2.
/// Cycles are half-open, so an epoch on a boundary starts the next cycle.
struct CosineWarmRestartSchedule {
  double lr0 = 1e-3;
  double eta_min = 1e-5;
  int t0 = 2;
  int t_mult = 2;

  static CosineWarmRestartSchedule with_defaults(double lr0) { return {lr0, lr0 / 100.0, 2, 2}; }
  void validate() const;
};

using Schedule = std::variant<StepDecaySchedule, CosineWarmRestartSchedule>;

struct CyclePosition {
  int cycle = 0;
  double elapsed = 0.0;  // t within the cycle
  double length = 0.0;   // T_i
};

CyclePosition cycle_position(const CosineWarmRestartSchedule& s, double epoch_progress);
/// The within-cycle closed form; `elapsed == length` gives eta_min.
double cosine_in_cycle(const CosineWarmRestartSchedule& s, double elapsed, double length);

double lr_at(const StepDecaySchedule& s, double epoch_progress);
double lr_at(const CosineWarmRestartSchedule& s, double epoch_progress);
double lr_at(const Schedule& s, double epoch_progress);

enum class MetricMode { maximize, minimize };

struct EarlyStopState {
  int patience = 5;
  std::optional<double> best_metric;
  int best_epoch = -1;
  int epochs_since_improvement = 0;
  /// Tie-break value recorded at best_epoch (validation loss during training).
  std::optional<double> best_secondary;
};

struct EarlyStopStep {
  EarlyStopState state;
  bool stop = false;
  bool improved = false;  // best_epoch moved to this epoch
};

/// Strict improvement resets the counter; stop fires when it reaches
/// patience. With `secondary`, an exact metric tie with a strictly lower
/// secondary value moves best_epoch without resetting the counter.
/// Throws std::domain_error on a NaN metric.
EarlyStopStep early_stop_update(const EarlyStopState& state, int epoch, double metric, MetricMode mode,
                                std::optional<double> secondary = std::nullopt);

}  // namespace dfd
