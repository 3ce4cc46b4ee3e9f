// One line per acceptance criterion: PASS, FAIL or SKIP with the measured
// values. Exit status: 0 when everything passes, 1 on any failure, 77 when
// nothing failed but some criteria could not run here.
//
// Criteria 11-13 read artifacts of a real benchmark run:
//   DFD_BENCHMARK_MANIFEST  manifest CSV of the benchmark (path,label,split)
//   DFD_SWEEP_DIR           completed `dfd sweep` directory
//   DFD_EVAL_DIR            holds <arch>/eval.json from `dfd evaluate` on the test split
// Criterion 7 uses resnet50-clip.dfdw from DFD_WEIGHTS_DIR when present.
// Arguments select criteria by number; none runs all.

#define DOCTEST_CONFIG_DISABLE
#include "unit/oracles.hpp"
#include "unit/test_support.hpp"
#include "unit/toy_backbone.hpp"

#include "dfd/data.hpp"
#include "dfd/explain.hpp"
#include "dfd/metrics.hpp"
#include "dfd/profile.hpp"
#include "dfd/schedule.hpp"
#include "dfd/sweep.hpp"
#include "dfd/train.hpp"

#include <chrono>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

using namespace dfd;
namespace fs = std::filesystem;

namespace {

enum class Verdict { pass, fail, skip };

struct Outcome {
  Verdict verdict = Verdict::fail;
  std::string detail;
};

Outcome pass(std::string d) { return {Verdict::pass, std::move(d)}; }
Outcome fail(std::string d) { return {Verdict::fail, std::move(d)}; }
Outcome skip(std::string d) { return {Verdict::skip, std::move(d)}; }
Outcome judge(bool ok, std::string d) { return {ok ? Verdict::pass : Verdict::fail, std::move(d)}; }

std::string fmt(double v, int precision = 4) {
  std::ostringstream o;
  o << std::setprecision(precision) << v;
  return o.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const char* env(const char* name) {
  const char* v = std::getenv(name);
  return v && *v ? v : nullptr;
}

const Architecture kArchOrder[] = {Architecture::resnet50, Architecture::vit_b32, Architecture::convnext_base};

// 1
Outcome metric_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  double worst_auc = 0.0, worst_ap = 0.0;
  int checked = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = std::uniform_int_distribution<int>(2, 50)(rng);
    const int levels = std::uniform_int_distribution<int>(2, 12)(rng);  // few levels force duplicate scores
    std::vector<ScoredPrediction> preds;
    for (int i = 0; i < n; ++i) {
      const Label l = std::bernoulli_distribution(0.5)(rng) ? Label::fake : Label::real;
      const double s = std::uniform_int_distribution<int>(0, levels)(rng) / static_cast<double>(levels);
      preds.push_back({"p" + std::to_string(i), s, l});
    }
    preds[0].label = Label::real;
    preds[1].label = Label::fake;
    const EvalReport r = evaluate(preds);
    worst_auc = std::max(worst_auc, std::abs(*r.roc_auc - oracle::auc(preds)));
    worst_ap = std::max(worst_ap, std::abs(*r.average_precision - oracle::average_precision(preds)));
    ++checked;
  }
  const double secs = seconds_since(t0);
  return judge(worst_auc <= 1e-9 && worst_ap <= 1e-12 && secs < 30.0,
               std::to_string(checked) + " instances, max |AUC - oracle| " + fmt(worst_auc) + ", max |AP - oracle| " +
                   fmt(worst_ap) + " (summation-order tolerance 1e-12), " + fmt(secs, 3) + " s");
}

// 2
Outcome schedule_closed_forms() {
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (int c = 0; c < 9; ++c) {
    const double lr0 = std::pow(10.0, std::uniform_real_distribution<double>(-6, -2)(rng));
    const double factor = std::uniform_real_distribution<double>(0.1, 0.9)(rng);
    const int period = std::uniform_int_distribution<int>(1, 6)(rng);
    const double eta_min = lr0 * std::uniform_real_distribution<double>(0.0, 0.1)(rng);
    const int t0 = std::uniform_int_distribution<int>(1, 5)(rng);
    const int t_mult = std::uniform_int_distribution<int>(1, 3)(rng);
    const StepDecaySchedule step{lr0, factor, period};
    const CosineWarmRestartSchedule cos{lr0, eta_min, t0, t_mult};
    const auto want_step = oracle::step_sequence(lr0, factor, period, 30);
    const auto want_cos = oracle::cosine_sequence(lr0, eta_min, t0, t_mult, 30);
    for (int e = 0; e < 30; ++e) {
      worst = std::max(worst, std::abs(lr_at(step, e) - want_step[e]) / want_step[e]);
      worst = std::max(worst, std::abs(lr_at(cos, e) - want_cos[e]) / lr0);
    }
  }
  const double example = lr_at(StepDecaySchedule{1e-3, 0.5, 2}, 4);
  const bool ok = worst <= 1e-12 && std::abs(example - 2.5e-4) <= 1e-12 * 2.5e-4;
  return judge(ok, "9 configs x 30 epochs, max relative error " + fmt(worst) + "; step example epoch 4 lr " + fmt(example, 6));
}

// 3
Outcome early_stopping() {
  std::mt19937_64 rng(11);
  int mismatches = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int patience = std::uniform_int_distribution<int>(1, 8)(rng);
    const int levels = std::uniform_int_distribution<int>(2, 20)(rng);
    std::vector<double> metrics(std::uniform_int_distribution<int>(1, 40)(rng));
    for (double& m : metrics) m = std::uniform_int_distribution<int>(0, levels)(rng) / static_cast<double>(levels);
    EarlyStopState s;
    s.patience = patience;
    std::optional<int> stop;
    for (int e = 0; e < static_cast<int>(metrics.size()); ++e) {
      const auto step = early_stop_update(s, e, metrics[e], MetricMode::maximize);
      s = step.state;
      if (step.stop) {
        stop = e;
        break;
      }
    }
    const auto want = oracle::early_stop(metrics, patience);
    const int seen = stop ? *stop + 1 : static_cast<int>(metrics.size());
    const double best = *std::max_element(metrics.begin(), metrics.begin() + seen);
    if (stop != want.stop_epoch || s.best_epoch != want.best_epoch || metrics[s.best_epoch] != best) ++mismatches;
  }
  return judge(mismatches == 0, "500 traces, " + std::to_string(mismatches) + " disagreements with the counter oracle");
}

DatasetManifest labels_only(int train_real, int train_fake, int test_real, int test_fake) {
  std::vector<LabeledImage> records;
  auto add = [&](Split s, Label l, int n) {
    for (int i = 0; i < n; ++i) {
      const std::string id = to_string(s) + "-" + to_string(l) + "-" + std::to_string(i);
      records.push_back({id, id + ".png", l, s});
    }
  };
  add(Split::train, Label::real, train_real);
  add(Split::train, Label::fake, train_fake);
  add(Split::test, Label::real, test_real);
  add(Split::test, Label::fake, test_fake);
  return make_manifest(std::move(records));
}

// 4
Outcome split_arithmetic() {
  std::mt19937_64 rng(5);
  int bad_1161 = 0, bad_invariant = 0, trials = 0;
  for (int fake = 100; fake <= 1061; fake += 31) {
    const auto out = derive_validation_split(labels_only(1161 - fake, fake, 300, 489), SplitSpec{});
    bad_1161 += out.count(Split::val) != 116 || out.count(Split::train) != 1045;
  }
  for (int t = 0; t < 200; ++t) {
    const int tr = std::uniform_int_distribution<int>(20, 600)(rng), tf = std::uniform_int_distribution<int>(20, 600)(rng);
    const auto m = labels_only(tr, tf, 15, 15);
    SplitSpec spec;
    spec.val_fraction_of_train = std::uniform_real_distribution<double>(0.05, 0.4)(rng);
    spec.seed = rng();
    const auto out = derive_validation_split(m, spec);
    ++trials;
    const auto n_val = static_cast<std::int64_t>(std::floor(spec.val_fraction_of_train * (tr + tf) + 0.5));
    std::set<std::string> ids;
    for (const auto& r : out.records) ids.insert(r.id);
    bool ok = out.count(Split::val) == n_val && ids.size() == m.records.size() && out.counts_consistent() &&
              out.count(Split::test) == m.count(Split::test);
    for (Label l : {Label::real, Label::fake}) {
      ok = ok && out.count(Split::train, l) + out.count(Split::val, l) == m.count(Split::train, l);
      const double share = static_cast<double>(m.count(Split::train, l)) / (tr + tf) * n_val;
      ok = ok && std::abs(out.count(Split::val, l) - share) <= 1.0;
    }
    bad_invariant += !ok;
  }
  return judge(bad_1161 == 0 && bad_invariant == 0,
               "1161-record manifests off by " + std::to_string(bad_1161) + "; " + std::to_string(bad_invariant) +
                   " of " + std::to_string(trials) + " random manifests broke partition or stratification");
}

// 5
Outcome gradcam_correctness() {
  double worst_fd = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    test::ToyBackbone b(4, true, seed);
    nn::Linear<double> head(4, 2);
    std::mt19937_64 rng(seed + 50);
    std::normal_distribution<double> d(0.0, 1.0);
    for (Index i = 0; i < head.weight().value.size(); ++i) head.weight().value[i] = d(rng);
    Tensor<double> x({1, 3, 8, 8});
    for (Index i = 0; i < x.size(); ++i) x[i] = d(rng);
    const ActivationGrid g = activation_grid<double>(b, head, x, Label::fake);
    b.set_recording(false);
    const Tensor<double> a = b.forward_trunk(x);
    double diff = 0.0, scale = 1e-6;
    for (Index i = 0; i < a.size(); ++i) {
      Tensor<double> up = a, down = a;
      up[i] += 1e-5;
      down[i] -= 1e-5;
      const double fd = (head.forward(b.forward_neck(up))[1] - head.forward(b.forward_neck(down))[1]) / 2e-5;
      diff = std::max(diff, std::abs(g.gradients[i] - fd));
      scale = std::max(scale, std::abs(fd));
    }
    worst_fd = std::max(worst_fd, diff / scale);
  }

  test::ToyBackbone b(3, true, 9);
  nn::Linear<double> zero_head(3, 2);
  zero_head.weight().value.set_zero();
  Tensor<double> x({1, 3, 8, 8}, 0.3);
  const Heatmap zero = heatmap_from_grid(activation_grid<double>(b, zero_head, x, Label::fake), 16, 16);
  const bool zero_ok = zero.all_zero && zero.upsampled.isZero(0.0);

  nn::Linear<double> head(3, 2);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0.0, 1.0);
  for (Index i = 0; i < head.weight().value.size(); ++i) head.weight().value[i] = d(rng);
  int negative = 0;
  for (int t = 0; t < 100; ++t) {
    for (Index i = 0; i < x.size(); ++i) x[i] = d(rng);
    const Heatmap hm = heatmap_from_grid(activation_grid<double>(b, head, x, std::nullopt), 16, 16);
    negative += hm.raw.minCoeff() < 0.0 || hm.upsampled.minCoeff() < 0.0;
  }
  return judge(worst_fd <= 1e-4 && zero_ok && negative == 0,
               "max gradient relative error " + fmt(worst_fd) + "; zero-weight heatmap flagged " +
                   (zero_ok ? "yes" : "no") + "; " + std::to_string(negative) + " of 100 heatmaps with negatives");
}

// 6
Outcome flop_counter() {
  nn::Linear<double> fc(4, 2);
  nn::OpCounter affine;
  fc.trace({1, 4}, affine);

  nn::Sequential<double> net;
  net.add("c1", std::make_unique<nn::Conv2d<double>>(3, 8, 3, 1, 1));
  net.add("relu", std::make_unique<nn::Activation<double>>(nn::ActivationKind::relu));
  net.add("c2", std::make_unique<nn::Conv2d<double>>(8, 16, 3, 2, 1));
  auto hand = [](std::uint64_t s) {
    const std::uint64_t h = (s - 1) / 2 + 1;
    return 9ull * 3 * 8 * s * s + 9ull * 8 * 16 * h * h;
  };
  const auto c32 = count_flops(net, 32).macs, c64 = count_flops(net, 64).macs;
  const bool ok = affine.macs == 8 && c32 == hand(32) && c64 == hand(64) && c64 == 4 * c32;
  return judge(ok, "affine 4->2 " + std::to_string(affine.macs) + " MACs; two-conv net " + std::to_string(c32) +
                       " MACs at 32 (hand " + std::to_string(hand(32)) + "), " + std::to_string(c64) + " at 64");
}

// 7
Outcome synthetic_overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = fs::temp_directory_path() / "dfd_acceptance_overfit";
  fs::remove_all(dir);
  const DatasetManifest data = test::toy_dataset(dir, 64, 16, 0, 80, 21);
  DetectorConfig model;
  model.arch = Architecture::resnet50;
  model.input_side = 64;
  model.freeze_backbone = true;
  if (const char* weights = env("DFD_WEIGHTS_DIR"); weights && fs::exists(fs::path(weights) / "resnet50-clip.dfdw")) {
    model.init = InitMode::clip;
    model.weights_dir = weights;
  }
  PreprocessConfig pp;
  pp.train_side = pp.eval_side = 64;
  TrainConfig cfg;
  cfg.lr0 = 1e-3;
  cfg.batch_size = 16;
  cfg.max_epochs = 20;
  cfg.patience = 20;
  cfg.seed = 1;
  auto det = build_detector(model);
  const TrainResult r = train(*det, data, pp, cfg);
  const auto train_records = data.in_split(Split::train);
  const auto scores = score_records(*det, train_records, pp);
  int correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) correct += (scores[i] >= 0.5) == (train_records[i]->label == Label::fake);
  const double acc = static_cast<double>(correct) / static_cast<double>(scores.size());
  const double secs = seconds_since(t0);
  fs::remove_all(dir);
  const std::string note = model.init == InitMode::clip ? "" : " (resnet50-clip.dfdw not found, random init)";
  return judge(acc >= 0.95 && secs < 600.0,
               "head-only resnet50/" + to_string(model.init) + note + " on 64 toy images: train accuracy " + fmt(acc) + " after " +
                   std::to_string(r.curve.size()) + " epochs (best epoch " + std::to_string(r.best_epoch) + "), " +
                   fmt(secs, 3) + " s");
}

std::unique_ptr<Detector<float>> standard(Architecture arch, Index side) {
  DetectorConfig c;
  c.arch = arch;
  c.input_side = side;
  return build_detector(c);
}

// 8
Outcome parameter_counts() {
  const std::map<Architecture, double> want{
      {Architecture::resnet50, 38.32}, {Architecture::vit_b32, 87.85}, {Architecture::convnext_base, 88.09}};
  bool ok = true;
  std::string detail;
  for (Architecture a : kArchOrder) {
    const double m = static_cast<double>(standard(a, 224)->parameter_counts().total) / 1e6;
    const double rel = std::abs(m - want.at(a)) / want.at(a);
    ok = ok && rel <= 0.02;
    detail += (detail.empty() ? "" : "; ") + to_string(a) + " " + fmt(m, 6) + " M vs " + fmt(want.at(a)) + " (" +
              fmt(100 * rel, 2) + "%)";
  }
  return judge(ok, detail);
}

// 9
Outcome flop_estimates() {
  const std::map<Architecture, double> want{
      {Architecture::resnet50, 12.22}, {Architecture::vit_b32, 8.82}, {Architecture::convnext_base, 30.71}};
  bool ok = true;
  std::string detail;
  for (Architecture a : kArchOrder) {
    auto det = standard(a, 224);
    const double g = count_flops(*det, 224).gflops();
    const double rel = std::abs(g - want.at(a)) / want.at(a);
    ok = ok && rel <= 0.05;
    detail += (detail.empty() ? "" : "; ") + to_string(a) + " " + fmt(g, 5) + " vs " + fmt(want.at(a)) + " (" +
              fmt(100 * rel, 2) + "%)";
  }
  return judge(ok, detail + " at 224 px, 2 x MACs");
}

// 10
Outcome latency_ordering() {
  std::map<Architecture, LatencyStats> lat;
  for (Architecture a : kArchOrder) {
    auto det = standard(a, 256);
    lat[a] = measure_latency(*det, 10, 3);
  }
  const double r = lat[Architecture::resnet50].mean_ms, v = lat[Architecture::vit_b32].mean_ms,
               c = lat[Architecture::convnext_base].mean_ms;
  std::string detail = "batch-1 CPU at 256 px, mean ms: vit_b32 " + fmt(v) + " +- " +
                       fmt(lat[Architecture::vit_b32].std_ms, 3) + ", resnet50 " + fmt(r) + " +- " +
                       fmt(lat[Architecture::resnet50].std_ms, 3) + ", convnext_base " + fmt(c) + " +- " +
                       fmt(lat[Architecture::convnext_base].std_ms, 3);
  return judge(v < r && r < c, detail);
}

// 11
Outcome best_cells() {
  const char* sweep = env("DFD_SWEEP_DIR");
  if (!sweep) return skip("needs a completed benchmark sweep (set DFD_SWEEP_DIR)");
  const auto results = load_sweep_results(sweep);
  const std::vector<std::pair<CellKey, double>> want{
      {{Architecture::convnext_base, InitMode::clip, SchedulerKind::cosine, 1e-5}, 0.846},
      {{Architecture::vit_b32, InitMode::clip, SchedulerKind::cosine, 1e-5}, 0.838},
      {{Architecture::resnet50, InitMode::imagenet, SchedulerKind::cosine, 1e-4}, 0.812}};
  bool ok = true;
  std::string detail;
  for (const auto& [key, target] : want) {
    auto it = std::find_if(results.begin(), results.end(), [&](const auto& r) { return r.key == key; });
    if (it == results.end() || it->status != CellStatus::done) {
      ok = false;
      detail += (detail.empty() ? "" : "; ") + key.id() + " not done";
      continue;
    }
    ok = ok && std::abs(it->best_val_accuracy - target) <= 0.03;
    detail += (detail.empty() ? "" : "; ") + key.id() + " " + fmt(it->best_val_accuracy) + " vs " + fmt(target);
  }
  return judge(ok, detail);
}

// 12
Outcome test_metrics() {
  const char* dir = env("DFD_EVAL_DIR");
  if (!dir) return skip("needs test-split evaluations of the best checkpoints (set DFD_EVAL_DIR)");
  const std::map<Architecture, double> want_acc{
      {Architecture::resnet50, 0.79}, {Architecture::vit_b32, 0.81}, {Architecture::convnext_base, 0.81}};
  bool ok = true;
  std::string detail;
  for (Architecture a : kArchOrder) {
    const fs::path file = fs::path(dir) / to_string(a) / "eval.json";
    if (!fs::exists(file)) {
      ok = false;
      detail += (detail.empty() ? "" : "; ") + file.string() + " missing";
      continue;
    }
    const auto j = nlohmann::json::parse(read_file(file));
    const double acc = j.at("accuracy");
    ok = ok && std::abs(acc - want_acc.at(a)) <= 0.03;
    detail += (detail.empty() ? "" : "; ") + to_string(a) + " accuracy " + fmt(acc) + " vs " + fmt(want_acc.at(a));
    if (a == Architecture::convnext_base) {
      const double auc = j.value("roc_auc", -1.0), ap = j.value("average_precision", -1.0),
                   r1 = j.value("recall_at_precision_1", -1.0);
      ok = ok && std::abs(auc - 0.89) <= 0.03 && std::abs(ap - 0.94) <= 0.03 && r1 >= 0.30;
      detail += ", AUC " + fmt(auc) + " vs 0.89, AP " + fmt(ap) + " vs 0.94, recall at precision 1 " + fmt(r1);
    }
  }
  return judge(ok, detail);
}

// 13
Outcome no_skill() {
  const char* manifest = env("DFD_BENCHMARK_MANIFEST");
  if (!manifest) return skip("needs the benchmark's split label counts (set DFD_BENCHMARK_MANIFEST)");
  const DatasetManifest m = load_manifest(manifest, fs::path(manifest).parent_path());
  const double b = no_skill_baseline(m);
  return judge(std::lround(b * 100) == 61 && train_majority(m) == Label::fake,
               "train majority " + to_string(train_majority(m)) + ", test accuracy " + fmt(b, 6) + " (" +
                   std::to_string(m.count(Split::test, Label::fake)) + " fake of " +
                   std::to_string(m.count(Split::test)) + ")");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"metric oracle equivalence", metric_oracles},
      {"scheduler closed forms", schedule_closed_forms},
      {"early stopping", early_stopping},
      {"split arithmetic", split_arithmetic},
      {"GradCAM correctness", gradcam_correctness},
      {"FLOP counter", flop_counter},
      {"synthetic overfit", synthetic_overfit},
      {"parameter counts", parameter_counts},
      {"FLOP estimates", flop_estimates},
      {"latency ordering", latency_ordering},
      {"best-cell validation accuracy", best_cells},
      {"test metrics", test_metrics},
      {"no-skill baseline", no_skill},
  };
  std::set<std::size_t> selected;
  for (int a = 1; a < argc; ++a) selected.insert(std::stoul(argv[a]));
  int failed = 0, skipped = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    ++ran;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = fail(std::string("threw: ") + e.what());
    }
    const char* tag = o.verdict == Verdict::pass ? "PASS" : o.verdict == Verdict::fail ? "FAIL" : "SKIP";
    failed += o.verdict == Verdict::fail;
    skipped += o.verdict == Verdict::skip;
    std::cout << "[" << tag << "] " << (i + 1) << ". " << criteria[i].first << ": " << o.detail << std::endl;
  }
  std::cout << ran - failed - skipped << " passed, " << failed << " failed, " << skipped << " skipped"
            << std::endl;
  if (failed) return 1;
  return skipped ? 77 : 0;
}
