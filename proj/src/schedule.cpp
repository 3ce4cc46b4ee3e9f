#include "dfd/schedule.hpp"

#include "dfd/config_fields.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace dfd {

void StepDecaySchedule::validate() const {
  require(lr0 > 0.0, "step schedule: lr0 must be positive");
  require(factor > 0.0 && factor < 1.0, "step schedule: factor must be in (0, 1)");
  require(period >= 1, "step schedule: period must be >= 1");
}

void CosineWarmRestartSchedule::validate() const {
  require(lr0 > 0.0, "cosine schedule: lr0 must be positive");
  require(eta_min >= 0.0 && eta_min < lr0, "cosine schedule: eta_min must be in [0, lr0)");
  require(t0 >= 1, "cosine schedule: t0 must be >= 1");
  require(t_mult >= 1, "cosine schedule: t_mult must be >= 1");
}

double lr_at(const StepDecaySchedule& s, double epoch_progress) {
  if (!(epoch_progress >= 0.0)) throw std::domain_error("lr_at: epoch must be nonnegative");
  return s.lr0 * std::pow(s.factor, std::floor(epoch_progress / s.period));
}

CyclePosition cycle_position(const CosineWarmRestartSchedule& s, double epoch_progress) {
  if (!(epoch_progress >= 0.0)) throw std::domain_error("lr_at: epoch must be nonnegative");
  CyclePosition pos;
  pos.length = s.t0;
  if (s.t_mult == 1) {
    const double k = std::floor(epoch_progress / s.t0);
    pos.cycle = static_cast<int>(k);
    pos.elapsed = epoch_progress - k * s.t0;
    return pos;
  }
  double start = 0.0;
  while (epoch_progress >= start + pos.length) {
    start += pos.length;
    pos.length *= s.t_mult;
    ++pos.cycle;
  }
  pos.elapsed = epoch_progress - start;
  return pos;
}

double cosine_in_cycle(const CosineWarmRestartSchedule& s, double elapsed, double length) {
  return s.eta_min + 0.5 * (s.lr0 - s.eta_min) * (1.0 + std::cos(std::numbers::pi * elapsed / length));
}

double lr_at(const CosineWarmRestartSchedule& s, double epoch_progress) {
  const CyclePosition pos = cycle_position(s, epoch_progress);
  return cosine_in_cycle(s, pos.elapsed, pos.length);
}

double lr_at(const Schedule& s, double epoch_progress) {
  return std::visit([&](const auto& sched) { return lr_at(sched, epoch_progress); }, s);
}

EarlyStopStep early_stop_update(const EarlyStopState& state, int epoch, double metric, MetricMode mode,
                                std::optional<double> secondary) {
  if (std::isnan(metric)) throw std::domain_error("early stopping: NaN validation metric at epoch " + std::to_string(epoch));
  EarlyStopStep out{state, false, false};
  EarlyStopState& s = out.state;
  const bool better = !s.best_metric || (mode == MetricMode::maximize ? metric > *s.best_metric : metric < *s.best_metric);
  if (better) {
    s.best_metric = metric;
    s.best_epoch = epoch;
    s.best_secondary = secondary;
    s.epochs_since_improvement = 0;
    out.improved = true;
  } else {
    ++s.epochs_since_improvement;
    if (secondary && metric == *s.best_metric && (!s.best_secondary || *secondary < *s.best_secondary)) {
      s.best_epoch = epoch;
      s.best_secondary = secondary;
      out.improved = true;
    }
  }
  out.stop = s.epochs_since_improvement >= s.patience;
  return out;
}

}  // namespace dfd
