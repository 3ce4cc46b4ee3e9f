#pragma once

#include "dfd/data.hpp"
#include "dfd/model.hpp"
#include "dfd/preprocess.hpp"
#include "dfd/schedule.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfd {

enum class SchedulerKind { step, cosine };
std::string to_string(SchedulerKind k);
SchedulerKind parse_scheduler(const std::string& s);

struct TrainConfig {
  double lr0 = 1e-4;
  SchedulerKind scheduler = SchedulerKind::cosine;
  double step_factor = 0.5;
  int step_period = 2;
  /// Unset (null in JSON) means lr0 / 100.
  std::optional<double> cosine_eta_min;
  int cosine_t0 = 2;
  int cosine_t_mult = 2;
  double weight_decay = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 32;
  int max_epochs = 50;
  int patience = 5;
  std::uint64_t seed = 0;
  /// Batches prepared ahead of the one being trained on (0 = inline).
  int prefetch = 1;

  void validate() const;
  Schedule schedule() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
  /// Running accuracy over the epoch's training batches (train-mode forward).
  double train_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> curve;
  int best_epoch = -1;
  double best_val_accuracy = 0.0;
  std::filesystem::path best_checkpoint;
  bool stopped_early = false;
  /// False when interrupted before early stopping or max_epochs.
  bool completed = false;
  double wall_time = 0.0;
};

nlohmann::json to_json(const TrainResult& r);
TrainResult train_result_from_json(const nlohmann::json& j);

/// Non-finite loss. The run directory keeps the last completed epoch.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  /// When set: config.snapshot, manifest.csv, curve.csv, best.ckpt,
  /// last.ckpt, meta.json and (once finished) result.json live here, and an
  /// existing directory is resumed.
  std::optional<std::filesystem::path> run_dir;
  /// Called after every epoch; returning false interrupts the run.
  std::function<bool(const EpochRecord&)> after_epoch;
  /// Progress lines; null for silence.
  std::ostream* log = nullptr;
  /// Load the best weights back into the detector before returning.
  bool restore_best = true;
};

/// Finetunes `detector` on the train split, validating on val every epoch,
/// with Adam, the configured per-epoch schedule and early stopping on
/// validation accuracy (ties: lower validation loss).
TrainResult train(Detector<float>& detector, const DatasetManifest& manifest, const PreprocessConfig& pp,
                  const TrainConfig& cfg, const TrainOptions& options = {});

/// Continues the run stored in `run_dir` from its last completed epoch; a
/// finished run returns its stored result untouched.
TrainResult resume(const std::filesystem::path& run_dir, const TrainOptions& options = {});

/// Rejects a run directory whose snapshot differs from `snapshot`, listing
/// the differing keys ("config mismatch: ...").
void check_snapshot(const std::filesystem::path& run_dir, const nlohmann::json& snapshot);

/// The configuration identity of a run.
nlohmann::json run_snapshot(const DetectorConfig& model, const PreprocessConfig& pp, const TrainConfig& cfg,
                            const DatasetManifest& manifest);

void write_curve_csv(const std::vector<EpochRecord>& curve, const std::filesystem::path& path);
std::vector<EpochRecord> read_curve_csv(const std::filesystem::path& path);

/// Eval-mode fake scores for records, batched.
std::vector<double> score_records(Detector<float>& detector, const std::vector<const LabeledImage*>& records,
                                  const PreprocessConfig& pp, int batch_size = 32);

}  // namespace dfd
