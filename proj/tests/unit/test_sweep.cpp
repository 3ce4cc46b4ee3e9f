#include "dfd/sweep.hpp"
#include "test_support.hpp"

#include <atomic>
#include <mutex>
#include <set>

using namespace dfd;
namespace fs = std::filesystem;

namespace {

DatasetManifest labels_only(int per_class) {
  std::vector<LabeledImage> records;
  for (Split s : {Split::train, Split::test}) {
    for (Label l : {Label::real, Label::fake}) {
      for (int i = 0; i < per_class; ++i) {
        const std::string id = to_string(s) + "-" + to_string(l) + "-" + std::to_string(i);
        records.push_back({id, id + ".png", l, s});
      }
    }
  }
  return make_manifest(std::move(records));
}

double fake_accuracy(const DetectorConfig& m, const TrainConfig& t) {
  return 0.5 + 0.1 * static_cast<int>(m.arch) + 0.03 * static_cast<int>(m.init) + (t.lr0 == 1e-4 ? 0.01 : 0.0);
}

/// Stand-in trainer: records each call and reports a value derived from the cell.
struct StubTrainer {
  std::atomic<int> calls{0};
  int fail_after = -1;  // calls beyond this throw
  std::mutex mutex;
  std::set<std::string> val_ids_seen;

  CellTrainer fn() {
    return [this](const DetectorConfig& m, const TrainConfig& t, const PreprocessConfig&, const DatasetManifest& data,
                  const fs::path&) {
      const int n = ++calls;
      if (fail_after >= 0 && n > fail_after) throw std::runtime_error("stub stopped");
      std::string ids;
      for (const auto* r : data.in_split(Split::val)) ids += r->id + ";";
      {
        std::lock_guard<std::mutex> lock(mutex);
        val_ids_seen.insert(ids);
      }
      TrainResult r;
      r.completed = true;
      r.best_epoch = 2;
      r.best_val_accuracy = fake_accuracy(m, t);
      return r;
    };
  }
};

SweepCellResult done_cell(Architecture a, InitMode i, double lr, double acc) {
  SweepCellResult r;
  r.key = {a, i, SchedulerKind::cosine, lr};
  r.status = CellStatus::done;
  r.best_val_accuracy = acc;
  r.seed_accuracies = {acc};
  return r;
}

double toy_cost(Architecture a) {
  switch (a) {
    case Architecture::resnet50: return 12.0;
    case Architecture::vit_b32: return 9.0;
    default: return 31.0;
  }
}

}  // namespace

TEST_CASE("grid enumeration") {
  SweepGrid g;
  CHECK(g.cell_count() == 54);
  const auto cells = g.cells();
  CHECK(cells.size() == 54);
  CHECK(std::set<CellKey>(cells.begin(), cells.end()).size() == 54);
  std::set<std::string> ids;
  for (const auto& c : cells) ids.insert(c.id());
  CHECK(ids.size() == 54);

  SweepGrid one;
  one.archs = {Architecture::vit_b32};
  one.inits = {InitMode::clip};
  one.schedulers = {SchedulerKind::step};
  one.lrs = {1e-5};
  REQUIRE(one.cells().size() == 1);
  const CellKey k = one.cells()[0];
  CHECK(one.model_for(k).arch == Architecture::vit_b32);
  CHECK(one.model_for(k).init == InitMode::clip);
  CHECK(one.train_for(k, 0).lr0 == 1e-5);
  CHECK(one.train_for(k, 0).scheduler == SchedulerKind::step);
  CHECK(one.train_for(k, 1).seed == one.train.seed + 1);

  CHECK(sweep_grid_from_json(to_json(g)).cells() == cells);
  SweepGrid empty = g;
  empty.lrs.clear();
  CHECK_THROWS_AS(empty.validate(), ValidationError);
}

TEST_CASE("resume executes only the missing cells") {
  const auto dir = test::scratch_dir("sweep_resume");
  const SweepGrid g;
  const auto data = labels_only(30);

  StubTrainer first;
  first.fail_after = 10;
  SweepOptions o;
  o.trainer = first.fn();
  const auto partial = run_sweep(g, data, dir, o);
  CHECK(std::count_if(partial.begin(), partial.end(), [](auto& r) { return r.status == CellStatus::done; }) == 10);
  CHECK(std::count_if(partial.begin(), partial.end(), [](auto& r) { return r.status == CellStatus::failed; }) == 44);
  for (const auto& r : partial) {
    if (r.status == CellStatus::failed) CHECK(r.message.find("stub stopped") != std::string::npos);
  }

  StubTrainer second;
  o.trainer = second.fn();
  const auto full = run_sweep(g, data, dir, o);
  CHECK(second.calls == 44);
  for (const auto& r : full) CHECK(r.status == CellStatus::done);

  StubTrainer third;
  o.trainer = third.fn();
  run_sweep(g, data, dir, o);
  CHECK(third.calls == 0);

  SUBCASE("every cell saw the same validation split") {
    CHECK(first.val_ids_seen.size() == 1);
    CHECK(second.val_ids_seen == first.val_ids_seen);
    std::set<std::string> hashes;
    for (const auto& r : full) hashes.insert(r.splits_hash);
    CHECK(hashes.size() == 1);
  }
  SUBCASE("tables reproduce from disk") {
    const auto loaded = load_sweep_results(dir);
    REQUIRE(loaded.size() == 54);
    CHECK(emit_table(loaded).csv == emit_table(full).csv);
    CHECK(read_file(dir / "table1.csv") == emit_table(loaded).csv);
    CHECK(read_file(dir / "table1.txt") == emit_table(loaded).txt);
  }
  SUBCASE("no resume reruns everything") {
    StubTrainer again;
    o.trainer = again.fn();
    o.resume = false;
    run_sweep(g, data, dir, o);
    CHECK(again.calls == 54);
  }
}

TEST_CASE("parallel cells give the same results") {
  SweepGrid g;
  g.archs = {Architecture::resnet50, Architecture::vit_b32};
  const auto data = labels_only(20);
  StubTrainer a, b;
  SweepOptions o;
  o.trainer = a.fn();
  const auto serial = run_sweep(g, data, test::scratch_dir("sweep_serial"), o);
  o.trainer = b.fn();
  o.jobs = 4;
  const auto parallel = run_sweep(g, data, test::scratch_dir("sweep_parallel"), o);
  CHECK(emit_table(serial).csv == emit_table(parallel).csv);
}

TEST_CASE("one failing cell does not stop the sweep") {
  SweepGrid g;
  g.archs = {Architecture::resnet50};
  g.inits = {InitMode::random, InitMode::imagenet};
  g.schedulers = {SchedulerKind::cosine};
  g.lrs = {1e-3, 1e-4};
  SweepOptions o;
  o.trainer = [](const DetectorConfig& m, const TrainConfig& t, const PreprocessConfig&, const DatasetManifest&,
                 const fs::path&) {
    if (m.init == InitMode::imagenet && t.lr0 == 1e-3) throw ArchiveError("missing resnet50-imagenet weights");
    if (m.init == InitMode::random && t.lr0 == 1e-3) throw TrainingDiverged("loss is nan at lr 1e-3");
    TrainResult r;
    r.completed = true;
    r.best_val_accuracy = 0.75;
    return r;
  };
  const auto results = run_sweep(g, labels_only(20), test::scratch_dir("sweep_isolation"), o);
  REQUIRE(results.size() == 4);
  std::map<std::string, CellStatus> status;
  for (const auto& r : results) status[r.key.id()] = r.status;
  CHECK(status.at(CellKey{Architecture::resnet50, InitMode::random, SchedulerKind::cosine, 1e-3}.id()) ==
        CellStatus::failed);
  CHECK(status.at(CellKey{Architecture::resnet50, InitMode::imagenet, SchedulerKind::cosine, 1e-3}.id()) ==
        CellStatus::skipped);
  CHECK(std::count_if(results.begin(), results.end(), [](auto& r) { return r.status == CellStatus::done; }) == 2);

  const TableText t = emit_table(results);
  CHECK(t.csv == "scheduler,lr,resnet50/random,resnet50/imagenet\n"
                 "cosine,0.001,—,—\n"
                 "cosine,1e-04,0.75,0.75\n");
  CHECK(t.txt.find("—") != std::string::npos);
}

TEST_CASE("best-cell selection") {
  std::vector<SweepCellResult> rs{
      done_cell(Architecture::convnext_base, InitMode::clip, 1e-4, 0.9),
      done_cell(Architecture::vit_b32, InitMode::clip, 1e-5, 0.9),
      done_cell(Architecture::resnet50, InitMode::clip, 1e-4, 0.9),
      done_cell(Architecture::resnet50, InitMode::random, 1e-4, 0.6),
      done_cell(Architecture::vit_b32, InitMode::imagenet, 1e-4, 0.95),
  };
  SweepCellResult failed = done_cell(Architecture::vit_b32, InitMode::random, 1e-3, 0.99);
  failed.status = CellStatus::failed;
  rs.push_back(failed);

  const auto top = select_best(rs, 4, toy_cost);
  REQUIRE(top.size() == 4);
  CHECK(top[0].key.arch == Architecture::vit_b32);
  CHECK(top[0].key.init == InitMode::imagenet);
  CHECK(top[1].key.arch == Architecture::vit_b32);  // 9 GFLOPs
  CHECK(top[2].key.arch == Architecture::resnet50);  // 12
  CHECK(top[3].key.arch == Architecture::convnext_base);  // 31
  CHECK(select_best(rs, 0, toy_cost).empty());
  CHECK(select_best(rs, 5, toy_cost).size() == 5);
  CHECK_THROWS_AS(select_best(rs, 6, toy_cost), std::invalid_argument);

  // Equal cost falls back to the cell id.
  std::vector<SweepCellResult> same{done_cell(Architecture::resnet50, InitMode::random, 1e-3, 0.8),
                                    done_cell(Architecture::resnet50, InitMode::clip, 1e-3, 0.8)};
  const auto first = select_best(same, 1, toy_cost)[0].key.id();
  CHECK(first == std::min(same[0].key.id(), same[1].key.id()));

  const auto per_arch = select_best_per_arch(rs, 1, toy_cost);
  CHECK(per_arch.size() == 3);
  CHECK(select_best_per_arch(rs, 3, toy_cost).size() == 5);  // capped at each arch's done cells
}

TEST_CASE("default tie-break cost orders the architectures") {
  CHECK(reference_gflops(Architecture::vit_b32) < reference_gflops(Architecture::resnet50));
  CHECK(reference_gflops(Architecture::resnet50) < reference_gflops(Architecture::convnext_base));
}

TEST_CASE("cell results serialize") {
  SweepCellResult r = done_cell(Architecture::vit_b32, InitMode::imagenet, 1e-5, 0.875);
  r.splits_hash = "abc";
  r.run_dir = "/tmp/x";
  const auto back = sweep_cell_from_json(to_json(r));
  CHECK(back.key == r.key);
  CHECK(back.best_val_accuracy == r.best_val_accuracy);
  CHECK(back.splits_hash == "abc");
  CHECK(back.status == CellStatus::done);
}
