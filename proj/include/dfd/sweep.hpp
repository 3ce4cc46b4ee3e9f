#pragma once

#include "dfd/data.hpp"
#include "dfd/model.hpp"
#include "dfd/preprocess.hpp"
#include "dfd/train.hpp"

#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace dfd {

struct CellKey {
  Architecture arch = Architecture::resnet50;
  InitMode init = InitMode::random;
  SchedulerKind scheduler = SchedulerKind::cosine;
  double lr = 1e-4;

  /// Filesystem-safe identifier, e.g. "convnext_base-clip-cosine-1e-05".
  std::string id() const;
  auto operator<=>(const CellKey&) const = default;
};

struct SweepGrid {
  std::vector<Architecture> archs{std::begin(kArchitectures), std::end(kArchitectures)};
  std::vector<InitMode> inits{std::begin(kInitModes), std::end(kInitModes)};
  std::vector<SchedulerKind> schedulers{SchedulerKind::step, SchedulerKind::cosine};
  std::vector<double> lrs{1e-3, 1e-4, 1e-5};
  /// Templates; arch/init and lr0/scheduler are overridden per cell.
  DetectorConfig model;
  TrainConfig train;
  PreprocessConfig preprocess;
  SplitSpec split;
  /// Seeds per cell (train.seed, train.seed + 1, ...); cells report mean and sd.
  int seeds = 1;

  void validate() const;
  std::size_t cell_count() const { return archs.size() * inits.size() * schedulers.size() * lrs.size(); }
  /// Cells in arch, init, scheduler, lr order.
  std::vector<CellKey> cells() const;
  DetectorConfig model_for(const CellKey& key) const;
  TrainConfig train_for(const CellKey& key, int seed_index) const;
};

nlohmann::json to_json(const SweepGrid& g);
SweepGrid sweep_grid_from_json(const nlohmann::json& j);

enum class CellStatus { done, failed, skipped };
std::string to_string(CellStatus s);

struct SweepCellResult {
  CellKey key;
  CellStatus status = CellStatus::failed;
  double best_val_accuracy = 0.0;  // mean over seeds
  double best_val_accuracy_sd = 0.0;
  std::vector<double> seed_accuracies;
  int best_epoch = -1;  // of the first seed
  std::filesystem::path run_dir;
  std::string splits_hash;
  std::string message;  // diagnostics for failed / skipped cells
};

nlohmann::json to_json(const SweepCellResult& r);
SweepCellResult sweep_cell_from_json(const nlohmann::json& j);

/// Trains one seed of one cell into `run_dir`. Missing pretrained weights
/// should surface as ArchiveError (recorded as skipped); anything else
/// thrown marks the cell failed.
using CellTrainer = std::function<TrainResult(const DetectorConfig& model, const TrainConfig& train,
                                              const PreprocessConfig& pp, const DatasetManifest& manifest,
                                              const std::filesystem::path& run_dir)>;

/// build_detector + train.
TrainResult default_cell_trainer(const DetectorConfig& model, const TrainConfig& train, const PreprocessConfig& pp,
                                 const DatasetManifest& manifest, const std::filesystem::path& run_dir);

struct SweepOptions {
  /// Reuse cells already recorded as done; otherwise every cell reruns.
  bool resume = true;
  CellTrainer trainer = default_cell_trainer;
  /// Cells trained concurrently (each cell owns its detector).
  int jobs = 1;
  std::ostream* log = nullptr;
};

/// Runs every cell of `grid` under `sweep_dir`:
///   sweep.json, splits.json, cells/<id>/[seed-<k>/] run directories with
///   cell.json, results.json, table1.csv, table1.txt.
/// The validation split is derived once (or re-applied from splits.json)
/// and shared by all cells.
std::vector<SweepCellResult> run_sweep(const SweepGrid& grid, const DatasetManifest& manifest,
                                       const std::filesystem::path& sweep_dir, const SweepOptions& options = {});

/// Reads cell.json files in grid order; checks they all used the persisted split.
std::vector<SweepCellResult> load_sweep_results(const std::filesystem::path& sweep_dir);

struct TableText {
  std::string csv;
  std::string txt;
};

/// Rows: scheduler x lr; columns: arch x init; cells not done render as "—".
TableText emit_table(const std::vector<SweepCellResult>& results);
void write_table(const std::vector<SweepCellResult>& results, const std::filesystem::path& sweep_dir);

/// Cost used to break accuracy ties (GFLOPs per arch).
using CellCost = std::function<double(Architecture)>;
/// GFLOPs of the standard-size backbone at 224 px, computed once per arch.
double reference_gflops(Architecture arch);

/// Top-k done cells by best_val_accuracy; ties go to fewer GFLOPs, then the
/// lexicographically smaller cell id. Throws std::invalid_argument when k
/// exceeds the number of done cells.
std::vector<SweepCellResult> select_best(const std::vector<SweepCellResult>& results, std::size_t k,
                                         const CellCost& cost = reference_gflops);
/// select_best applied within each architecture.
std::vector<SweepCellResult> select_best_per_arch(const std::vector<SweepCellResult>& results, std::size_t k,
                                                  const CellCost& cost = reference_gflops);

}  // namespace dfd
