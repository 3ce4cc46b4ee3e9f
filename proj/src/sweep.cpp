#include "dfd/sweep.hpp"

#include "dfd/archive.hpp"
#include "dfd/csv.hpp"
#include "dfd/profile.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace dfd {
namespace fs = std::filesystem;

std::string CellKey::id() const {
  return to_string(arch) + "-" + to_string(init) + "-" + to_string(scheduler) + "-" + format_number(lr);
}

void SweepGrid::validate() const {
  require(!archs.empty() && !inits.empty() && !schedulers.empty() && !lrs.empty(), "sweep: every grid axis must be nonempty");
  for (double lr : lrs) require(lr > 0.0 && std::isfinite(lr), "sweep: learning rates must be positive");
  auto unique = [](auto v) {
    std::sort(v.begin(), v.end());
    return std::adjacent_find(v.begin(), v.end()) == v.end();
  };
  require(unique(archs) && unique(inits) && unique(schedulers) && unique(lrs), "sweep: grid axes must not repeat values");
  require(seeds >= 1, "sweep: seeds must be at least 1");
  model.validate();
  train.validate();
  preprocess.validate();
  split.validate();
}

std::vector<CellKey> SweepGrid::cells() const {
  std::vector<CellKey> out;
  for (auto a : archs) {
    for (auto i : inits) {
      for (auto s : schedulers) {
        for (double lr : lrs) out.push_back({a, i, s, lr});
      }
    }
  }
  return out;
}

DetectorConfig SweepGrid::model_for(const CellKey& key) const {
  DetectorConfig m = model;
  m.arch = key.arch;
  m.init = key.init;
  return m;
}

TrainConfig SweepGrid::train_for(const CellKey& key, int seed_index) const {
  TrainConfig t = train;
  t.lr0 = key.lr;
  t.scheduler = key.scheduler;
  t.cosine_eta_min.reset();  // lr0 / 100 per cell
  t.seed = train.seed + static_cast<std::uint64_t>(seed_index);
  return t;
}

nlohmann::json to_json(const SweepGrid& g) {
  nlohmann::json archs = nlohmann::json::array(), inits = nlohmann::json::array(), scheds = nlohmann::json::array();
  for (auto a : g.archs) archs.push_back(to_string(a));
  for (auto i : g.inits) inits.push_back(to_string(i));
  for (auto s : g.schedulers) scheds.push_back(to_string(s));
  nlohmann::json train = to_json(g.train);
  train.erase("lr0");
  train.erase("scheduler");
  train.erase("cosine_eta_min");
  nlohmann::json model = to_json(g.model);
  model.erase("arch");
  model.erase("init");
  return {{"archs", archs},     {"inits", inits},           {"schedulers", scheds},      {"lrs", g.lrs},
          {"seeds", g.seeds},   {"model", model},           {"train", train},            {"preprocess", to_json(g.preprocess)},
          {"split", to_json(g.split)}};
}

SweepGrid sweep_grid_from_json(const nlohmann::json& j) {
  SweepGrid g;
  FieldReader r(j, "sweep");
  std::vector<std::string> names;
  if (r.get("archs", names)) {
    g.archs.clear();
    for (const auto& n : names) g.archs.push_back(parse_architecture(n));
  }
  if (r.get("inits", names)) {
    g.inits.clear();
    for (const auto& n : names) g.inits.push_back(parse_init_mode(n));
  }
  if (r.get("schedulers", names)) {
    g.schedulers.clear();
    for (const auto& n : names) g.schedulers.push_back(parse_scheduler(n));
  }
  r.get("lrs", g.lrs);
  r.get("seeds", g.seeds);
  if (const auto* m = r.child("model")) {
    nlohmann::json mj = *m;
    require(!mj.contains("arch") && !mj.contains("init"), "sweep.model: arch and init come from the grid axes");
    g.model = detector_config_from_json(mj);
  }
  if (const auto* t = r.child("train")) {
    nlohmann::json tj = *t;
    require(!tj.contains("lr0") && !tj.contains("scheduler"), "sweep.train: lr0 and scheduler come from the grid axes");
    g.train = train_config_from_json(tj);
  }
  if (const auto* p = r.child("preprocess")) g.preprocess = preprocess_config_from_json(*p);
  if (const auto* s = r.child("split")) g.split = split_spec_from_json(*s);
  r.finish();
  g.validate();
  return g;
}

std::string to_string(CellStatus s) {
  switch (s) {
    case CellStatus::done: return "done";
    case CellStatus::failed: return "failed";
    case CellStatus::skipped: return "skipped";
  }
  return "?";
}

namespace {

CellStatus parse_status(const std::string& s) {
  if (s == "done") return CellStatus::done;
  if (s == "failed") return CellStatus::failed;
  if (s == "skipped") return CellStatus::skipped;
  throw ValidationError("unknown cell status '" + s + "'");
}

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("corrupt " + path.string() + ": " + e.what());
  }
}

/// Terminal columns of a UTF-8 string (one per code point).
std::size_t display_width(const std::string& s) {
  return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
}

std::string pad(const std::string& s, std::size_t width, bool left) {
  const std::string fill(width > display_width(s) ? width - display_width(s) : 0, ' ');
  return left ? s + fill : fill + s;
}

constexpr const char* kMissing = "—";

}  // namespace

nlohmann::json to_json(const SweepCellResult& r) {
  return {{"arch", to_string(r.key.arch)},
          {"init", to_string(r.key.init)},
          {"scheduler", to_string(r.key.scheduler)},
          {"lr", r.key.lr},
          {"id", r.key.id()},
          {"status", to_string(r.status)},
          {"best_val_accuracy", r.best_val_accuracy},
          {"best_val_accuracy_sd", r.best_val_accuracy_sd},
          {"seed_accuracies", r.seed_accuracies},
          {"best_epoch", r.best_epoch},
          {"run_dir", r.run_dir.string()},
          {"splits_hash", r.splits_hash},
          {"message", r.message}};
}

SweepCellResult sweep_cell_from_json(const nlohmann::json& j) {
  SweepCellResult r;
  r.key = {parse_architecture(j.at("arch")), parse_init_mode(j.at("init")), parse_scheduler(j.at("scheduler")),
           j.at("lr").get<double>()};
  r.status = parse_status(j.at("status"));
  r.best_val_accuracy = j.at("best_val_accuracy");
  r.best_val_accuracy_sd = j.value("best_val_accuracy_sd", 0.0);
  r.seed_accuracies = j.value("seed_accuracies", std::vector<double>{});
  r.best_epoch = j.at("best_epoch");
  r.run_dir = j.at("run_dir").get<std::string>();
  r.splits_hash = j.value("splits_hash", "");
  r.message = j.value("message", "");
  return r;
}

TrainResult default_cell_trainer(const DetectorConfig& model, const TrainConfig& train_cfg, const PreprocessConfig& pp,
                                 const DatasetManifest& manifest, const fs::path& run_dir) {
  auto detector = build_detector(model);
  TrainOptions options;
  options.run_dir = run_dir;
  options.restore_best = false;
  return train(*detector, manifest, pp, train_cfg, options);
}

std::vector<SweepCellResult> run_sweep(const SweepGrid& grid, const DatasetManifest& manifest, const fs::path& sweep_dir,
                                       const SweepOptions& options) {
  grid.validate();
  fs::create_directories(sweep_dir / "cells");

  // Shared templates must match an existing sweep; axes may grow.
  const nlohmann::json grid_json = to_json(grid);
  const fs::path grid_path = sweep_dir / "sweep.json";
  if (options.resume && fs::exists(grid_path)) {
    nlohmann::json stored = read_json(grid_path);
    for (const char* key : {"model", "train", "preprocess", "split", "seeds"}) {
      if (stored.value(key, nlohmann::json()) != grid_json[key]) {
        throw ValidationError("config mismatch with existing sweep " + sweep_dir.string() + " (" + key + ")");
      }
    }
  }
  write_file_atomic(grid_path, grid_json.dump(2) + "\n");

  DatasetManifest m;
  const fs::path splits_path = sweep_dir / "splits.json";
  if (fs::exists(splits_path)) {
    m = apply_splits(manifest, splits_path);
  } else {
    m = manifest.count(Split::val) > 0 ? manifest : derive_validation_split(manifest, grid.split);
    save_splits(m, grid.split, splits_path);
  }
  const std::string hash = splits_hash(m);

  const std::vector<CellKey> cells = grid.cells();
  std::vector<SweepCellResult> results(cells.size());
  std::mutex log_mutex;
  auto log = [&](const std::string& line) {
    if (!options.log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    *options.log << line << std::endl;
  };

  auto run_cell = [&](std::size_t index) {
    const CellKey& key = cells[index];
    const fs::path cell_dir = sweep_dir / "cells" / key.id();
    const fs::path status_path = cell_dir / "cell.json";
    if (options.resume && fs::exists(status_path)) {
      SweepCellResult prior = sweep_cell_from_json(read_json(status_path));
      if (prior.status == CellStatus::done && prior.splits_hash == hash) {
        results[index] = prior;
        log("[" + key.id() + "] done earlier, skipped");
        return;
      }
    }
    if (!options.resume && fs::exists(cell_dir)) fs::remove_all(cell_dir);

    SweepCellResult r;
    r.key = key;
    r.run_dir = cell_dir;
    r.splits_hash = hash;
    log("[" + key.id() + "] training");
    try {
      for (int s = 0; s < grid.seeds; ++s) {
        const fs::path run_dir = grid.seeds > 1 ? cell_dir / ("seed-" + std::to_string(s)) : cell_dir;
        DetectorConfig model = grid.model_for(key);
        model.seed = grid.model.seed + static_cast<std::uint64_t>(s);
        const TrainResult tr = options.trainer(model, grid.train_for(key, s), grid.preprocess, m, run_dir);
        if (!tr.completed) throw std::runtime_error("training was interrupted");
        r.seed_accuracies.push_back(tr.best_val_accuracy);
        if (s == 0) r.best_epoch = tr.best_epoch;
      }
      const double n = static_cast<double>(r.seed_accuracies.size());
      r.best_val_accuracy = std::accumulate(r.seed_accuracies.begin(), r.seed_accuracies.end(), 0.0) / n;
      double ss = 0.0;
      for (double a : r.seed_accuracies) ss += (a - r.best_val_accuracy) * (a - r.best_val_accuracy);
      r.best_val_accuracy_sd = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
      r.status = CellStatus::done;
    } catch (const ArchiveError& e) {
      r.status = CellStatus::skipped;
      r.message = e.what();
    } catch (const std::exception& e) {
      r.status = CellStatus::failed;
      r.message = e.what();
    }
    fs::create_directories(cell_dir);
    write_file_atomic(status_path, to_json(r).dump(2) + "\n");
    log("[" + key.id() + "] " + to_string(r.status) +
        (r.status == CellStatus::done ? " best_val_accuracy " + format_number(r.best_val_accuracy) : ": " + r.message));
    results[index] = r;
  };

  const int jobs = std::max(1, std::min<int>(options.jobs, static_cast<int>(cells.size())));
  if (jobs == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(i);
      });
    }
    for (auto& t : workers) t.join();
  }

  nlohmann::json all = nlohmann::json::array();
  for (const auto& r : results) all.push_back(to_json(r));
  write_file_atomic(sweep_dir / "results.json", all.dump(2) + "\n");
  write_table(results, sweep_dir);
  return results;
}

std::vector<SweepCellResult> load_sweep_results(const fs::path& sweep_dir) {
  const fs::path grid_path = sweep_dir / "sweep.json";
  if (!fs::exists(grid_path)) throw ValidationError(sweep_dir.string() + " is not a sweep directory (no sweep.json)");
  const SweepGrid grid = sweep_grid_from_json(read_json(grid_path));
  const std::string hash =
      fs::exists(sweep_dir / "splits.json") ? read_json(sweep_dir / "splits.json").value("hash", "") : std::string();
  std::vector<SweepCellResult> out;
  for (const CellKey& key : grid.cells()) {
    const fs::path status_path = sweep_dir / "cells" / key.id() / "cell.json";
    if (!fs::exists(status_path)) {
      SweepCellResult r;
      r.key = key;
      r.status = CellStatus::skipped;
      r.message = "not run";
      out.push_back(r);
      continue;
    }
    SweepCellResult r = sweep_cell_from_json(read_json(status_path));
    if (r.status == CellStatus::done && !hash.empty() && r.splits_hash != hash) {
      throw ValidationError("cell " + key.id() + " was trained on a different validation split (hash " + r.splits_hash +
                            ", expected " + hash + ")");
    }
    out.push_back(r);
  }
  return out;
}

TableText emit_table(const std::vector<SweepCellResult>& results) {
  std::vector<std::pair<Architecture, InitMode>> cols;
  std::vector<std::pair<SchedulerKind, double>> rows;
  std::map<std::tuple<SchedulerKind, double, Architecture, InitMode>, const SweepCellResult*> cell;
  bool multi_seed = false;
  for (const auto& r : results) {
    const auto col = std::make_pair(r.key.arch, r.key.init);
    const auto row = std::make_pair(r.key.scheduler, r.key.lr);
    if (std::find(cols.begin(), cols.end(), col) == cols.end()) cols.push_back(col);
    if (std::find(rows.begin(), rows.end(), row) == rows.end()) rows.push_back(row);
    if (r.status == CellStatus::done) cell[{row.first, row.second, col.first, col.second}] = &r;
    multi_seed = multi_seed || r.seed_accuracies.size() > 1;
  }

  std::vector<std::vector<std::string>> text{{"scheduler", "lr"}};
  std::string csv = "scheduler,lr";
  for (const auto& [a, i] : cols) {
    const std::string name = to_string(a) + "/" + to_string(i);
    csv += "," + name;
    if (multi_seed) csv += "," + name + " sd";
    text[0].push_back(name);
  }
  csv += "\n";
  for (const auto& [s, lr] : rows) {
    std::vector<std::string> line{to_string(s), format_number(lr)};
    csv += to_string(s) + "," + format_number(lr);
    for (const auto& [a, i] : cols) {
      auto it = cell.find({s, lr, a, i});
      if (it == cell.end()) {
        csv += std::string(",") + kMissing + (multi_seed ? std::string(",") + kMissing : "");
        line.push_back(kMissing);
        continue;
      }
      const SweepCellResult& r = *it->second;
      csv += "," + format_number(r.best_val_accuracy);
      if (multi_seed) csv += "," + format_number(r.best_val_accuracy_sd);
      std::ostringstream v;
      v << std::fixed << std::setprecision(3) << r.best_val_accuracy;
      if (r.seed_accuracies.size() > 1) v << "±" << std::setprecision(3) << r.best_val_accuracy_sd;
      line.push_back(v.str());
    }
    csv += "\n";
    text.push_back(line);
  }

  std::vector<std::size_t> width(text[0].size(), 0);
  for (const auto& line : text) {
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], display_width(line[i]));
  }
  std::string txt;
  for (std::size_t k = 0; k < text.size(); ++k) {
    for (std::size_t i = 0; i < text[k].size(); ++i) txt += (i ? "  " : "") + pad(text[k][i], width[i], i < 2);
    txt += "\n";
    if (k == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      txt += std::string(total - 2, '-') + "\n";
    }
  }
  return {csv, txt};
}

void write_table(const std::vector<SweepCellResult>& results, const fs::path& sweep_dir) {
  const TableText t = emit_table(results);
  write_file_atomic(sweep_dir / "table1.csv", t.csv);
  write_file_atomic(sweep_dir / "table1.txt", t.txt);
}

double reference_gflops(Architecture arch) {
  static std::mutex mutex;
  static std::map<Architecture, double> cache;
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(arch);
  if (it != cache.end()) return it->second;
  const auto backbone = make_backbone<float>(arch, ModelVariant::standard, 224);
  const FlopCount f = count_flops(*backbone, 224);
  const double head_macs = 2.0 * static_cast<double>(backbone->feature_dim());
  return cache[arch] = f.gflops() + 2.0 * head_macs / 1e9;
}

std::vector<SweepCellResult> select_best(const std::vector<SweepCellResult>& results, std::size_t k, const CellCost& cost) {
  std::vector<SweepCellResult> done;
  for (const auto& r : results) {
    if (r.status == CellStatus::done) done.push_back(r);
  }
  if (k > done.size()) {
    throw std::invalid_argument("select_best: k = " + std::to_string(k) + " exceeds the " + std::to_string(done.size()) +
                                " completed cells");
  }
  std::stable_sort(done.begin(), done.end(), [&](const SweepCellResult& a, const SweepCellResult& b) {
    if (a.best_val_accuracy != b.best_val_accuracy) return a.best_val_accuracy > b.best_val_accuracy;
    if (a.key.arch != b.key.arch) {
      const double ca = cost(a.key.arch), cb = cost(b.key.arch);
      if (ca != cb) return ca < cb;
    }
    return a.key.id() < b.key.id();
  });
  done.resize(k);
  return done;
}

std::vector<SweepCellResult> select_best_per_arch(const std::vector<SweepCellResult>& results, std::size_t k,
                                                  const CellCost& cost) {
  std::vector<Architecture> archs;
  for (const auto& r : results) {
    if (std::find(archs.begin(), archs.end(), r.key.arch) == archs.end()) archs.push_back(r.key.arch);
  }
  std::vector<SweepCellResult> out;
  for (Architecture a : archs) {
    std::vector<SweepCellResult> subset;
    std::copy_if(results.begin(), results.end(), std::back_inserter(subset), [a](const auto& r) { return r.key.arch == a; });
    for (auto& r : select_best(subset, std::min(k, static_cast<std::size_t>(std::count_if(
                                                       subset.begin(), subset.end(),
                                                       [](const auto& x) { return x.status == CellStatus::done; }))),
                               cost)) {
      out.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace dfd
