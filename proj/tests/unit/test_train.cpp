#include "dfd/config_fields.hpp"
#include "dfd/train.hpp"
#include "test_support.hpp"

using namespace dfd;
namespace fs = std::filesystem;

namespace {

DetectorConfig tiny_model(bool frozen = false) {
  DetectorConfig c;
  c.arch = Architecture::convnext_base;
  c.variant = ModelVariant::tiny;
  c.input_side = 32;
  c.freeze_backbone = frozen;
  c.dropout_rate = 0.0;
  return c;
}

PreprocessConfig pp32() {
  PreprocessConfig p;
  p.train_side = p.eval_side = 32;
  return p;
}

TrainConfig quick(int epochs) {
  TrainConfig t;
  t.lr0 = 1e-3;
  t.batch_size = 8;
  t.max_epochs = epochs;
  t.patience = epochs;
  t.seed = 4;
  return t;
}

const DatasetManifest& toy() {
  static const DatasetManifest m = test::toy_dataset(test::scratch_dir("train_images"), 24, 8, 8, 40);
  return m;
}

std::string slurp(const fs::path& p) { return read_file(p); }

}  // namespace

TEST_CASE("training records a consistent curve and run directory") {
  const auto dir = test::scratch_dir("train_run");
  auto det = build_detector(tiny_model());
  const TrainConfig cfg = quick(4);
  TrainOptions o;
  o.run_dir = dir / "run";
  const TrainResult r = train(*det, toy(), pp32(), cfg, o);

  REQUIRE(r.curve.size() == 4);
  CHECK(r.completed);
  CHECK_FALSE(r.stopped_early);
  double best = 0.0;
  int best_epoch = -1;
  for (const auto& e : r.curve) {
    CHECK(e.lr == lr_at(cfg.schedule(), e.epoch));
    CHECK(e.train_loss >= 0.0);
    CHECK(std::isfinite(e.val_loss));
    CHECK(e.val_accuracy >= 0.0);
    CHECK(e.val_accuracy <= 1.0);
    if (e.val_accuracy > best) {
      best = e.val_accuracy;
      best_epoch = e.epoch;
    }
  }
  CHECK(r.best_val_accuracy == best);
  CHECK(r.curve[r.best_epoch].val_accuracy == best);
  CHECK(r.best_epoch >= best_epoch);
  CHECK(r.best_checkpoint == dir / "run" / "best.ckpt");

  for (const char* f : {"config.snapshot", "curve.csv", "best.ckpt", "last.ckpt", "meta.json", "manifest.csv", "result.json"}) {
    CHECK_MESSAGE(fs::exists(dir / "run" / f), f);
  }
  const std::string csv = slurp(dir / "run" / "curve.csv");
  CHECK(csv.rfind("epoch,train_loss,val_loss,val_acc,lr", 0) == 0);
  const auto back = read_curve_csv(dir / "run" / "curve.csv");
  REQUIRE(back.size() == 4);
  CHECK(back[2].val_loss == r.curve[2].val_loss);

  const auto meta = nlohmann::json::parse(slurp(dir / "run" / "meta.json"));
  for (const char* k : {"seed", "hardware", "wall_time", "git_hash"}) CHECK_MESSAGE(meta.contains(k), k);

  // The best checkpoint holds the best epoch's weights.
  auto best_det = load_checkpoint(dir / "run" / "best.ckpt").detector;
  const auto& val = toy().in_split(Split::val);
  const auto a = score_records(*best_det, val, pp32());
  const auto b = score_records(*det, val, pp32());
  CHECK(a == b);
}

TEST_CASE("frozen weights plateau and stop after patience epochs") {
  auto det = build_detector(tiny_model(true));
  TrainConfig cfg = quick(20);
  cfg.patience = 3;
  cfg.lr0 = 1e-30;  // updates vanish below float resolution
  cfg.weight_decay = 0.0;
  const TrainResult r = train(*det, toy(), pp32(), cfg);
  CHECK(r.stopped_early);
  CHECK(r.best_epoch == 0);
  CHECK(r.curve.size() == 4);
}

TEST_CASE("fixed seed without dropout reproduces epoch 0") {
  TrainConfig cfg = quick(1);
  auto a = build_detector(tiny_model());
  auto b = build_detector(tiny_model());
  const auto ra = train(*a, toy(), pp32(), cfg);
  const auto rb = train(*b, toy(), pp32(), cfg);
  CHECK(ra.curve[0].train_loss == rb.curve[0].train_loss);
}

TEST_CASE("prefetch does not change the batch order") {
  TrainConfig cfg = quick(2);
  cfg.prefetch = 0;
  auto a = build_detector(tiny_model());
  const auto ra = train(*a, toy(), pp32(), cfg);
  cfg.prefetch = 3;
  auto b = build_detector(tiny_model());
  const auto rb = train(*b, toy(), pp32(), cfg);
  for (int e = 0; e < 2; ++e) CHECK(ra.curve[e].train_loss == rb.curve[e].train_loss);
}

TEST_CASE("interrupted then resumed run equals an uninterrupted one") {
  const auto dir = test::scratch_dir("train_resume");
  auto cfg_model = tiny_model();
  cfg_model.dropout_rate = 0.3;  // exercise the dropout stream too
  TrainConfig cfg = quick(5);
  cfg.scheduler = SchedulerKind::cosine;

  auto full_det = build_detector(cfg_model);
  TrainOptions full;
  full.run_dir = dir / "full";
  const auto want = train(*full_det, toy(), pp32(), cfg, full);

  auto part_det = build_detector(cfg_model);
  TrainOptions part;
  part.run_dir = dir / "part";
  part.after_epoch = [](const EpochRecord& e) { return e.epoch < 2; };
  const auto stopped = train(*part_det, toy(), pp32(), cfg, part);
  CHECK_FALSE(stopped.completed);
  CHECK(stopped.curve.size() == 3);
  CHECK_FALSE(fs::exists(dir / "part" / "result.json"));

  const auto got = resume(dir / "part");
  CHECK(got.completed);
  REQUIRE(got.curve.size() == want.curve.size());
  for (std::size_t i = 0; i < want.curve.size(); ++i) {
    CHECK(got.curve[i].epoch == static_cast<int>(i));
    CHECK(got.curve[i].train_loss == want.curve[i].train_loss);
    CHECK(got.curve[i].val_loss == want.curve[i].val_loss);
    CHECK(got.curve[i].val_accuracy == want.curve[i].val_accuracy);
    CHECK(got.curve[i].lr == want.curve[i].lr);
  }
  CHECK(got.best_epoch == want.best_epoch);

  SUBCASE("resuming a finished run is a no-op") {
    const std::string before = slurp(dir / "part" / "curve.csv");
    const auto t0 = fs::last_write_time(dir / "part" / "last.ckpt");
    const auto again = resume(dir / "part");
    CHECK(again.curve.size() == got.curve.size());
    CHECK(again.best_epoch == got.best_epoch);
    CHECK(slurp(dir / "part" / "curve.csv") == before);
    CHECK(fs::last_write_time(dir / "part" / "last.ckpt") == t0);
  }
  SUBCASE("changed settings are refused") {
    TrainConfig changed = cfg;
    changed.lr0 = 1e-4;
    auto det = build_detector(cfg_model);
    TrainOptions o;
    o.run_dir = dir / "part";
    CHECK_THROWS_WITH_AS(train(*det, toy(), pp32(), changed, o), doctest::Contains("config mismatch"),
                         ValidationError);
  }
}

TEST_CASE("divergence aborts with a diagnostic") {
  auto det = build_detector(tiny_model());
  TrainConfig cfg = quick(3);
  cfg.lr0 = 1e37;
  cfg.scheduler = SchedulerKind::step;
  CHECK_THROWS_WITH_AS(train(*det, toy(), pp32(), cfg), doctest::Contains("lr"), TrainingDiverged);
}

TEST_CASE("preconditions") {
  auto det = build_detector(tiny_model());
  PreprocessConfig wrong = pp32();
  wrong.eval_side = 64;
  CHECK_THROWS_AS(train(*det, toy(), wrong, quick(1)), ValidationError);

  auto no_val = toy();
  for (auto& r : no_val.records) {
    if (r.split == Split::val) r.split = Split::train;
  }
  no_val.recount();
  CHECK_THROWS_AS(train(*det, no_val, pp32(), quick(1)), ValidationError);

  TrainConfig bad = quick(3);
  bad.patience = 4;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = quick(3);
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("train config serialization") {
  TrainConfig c;
  c.scheduler = SchedulerKind::step;
  c.cosine_eta_min = 3e-7;
  const auto back = train_config_from_json(to_json(c));
  CHECK(back.scheduler == SchedulerKind::step);
  CHECK(back.cosine_eta_min == 3e-7);
  const auto defaults = train_config_from_json(to_json(TrainConfig{}));
  CHECK_FALSE(defaults.cosine_eta_min.has_value());
  const auto sched = std::get<CosineWarmRestartSchedule>(TrainConfig{}.schedule());
  CHECK(sched.eta_min == doctest::Approx(1e-6));
  auto j = to_json(c);
  j["momentum"] = 0.9;
  CHECK_THROWS_AS(train_config_from_json(j), ValidationError);
}
