// dfd: prepare, train, sweep, evaluate, gradcam, profile, report.
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

#include "dfd/archive.hpp"
#include "dfd/config.hpp"
#include "dfd/csv.hpp"
#include "dfd/data.hpp"
#include "dfd/explain.hpp"
#include "dfd/metrics.hpp"
#include "dfd/model.hpp"
#include "dfd/profile.hpp"
#include "dfd/report.hpp"
#include "dfd/image.hpp"
#include "dfd/preprocess.hpp"
#include "dfd/sweep.hpp"
#include "dfd/system.hpp"
#include "dfd/train.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <csignal>
#include <iostream>

namespace fs = std::filesystem;
using namespace dfd;

namespace {

std::atomic<bool> g_interrupted{false};

extern "C" void on_sigint(int) { g_interrupted = true; }

class Interrupted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Exposes every leaf key of a JSON config as a `--dotted.key` flag, next to
/// `--config FILE`. Precedence: defaults < file < flags.
class ConfigFlags {
 public:
  ConfigFlags(CLI::App* app, nlohmann::json defaults) : defaults_(std::move(defaults)) {
    app->add_option("--config", file_, "JSON config file; keys mirror the --section.key flags")->check(CLI::ExistingFile);
    for (const auto& [key, value] : flatten_config(defaults_)) {
      auto holder = std::make_unique<std::string>();
      const std::string shown = value.is_null() ? "unset" : value.is_array() ? join(value) : value.dump();
      CLI::Option* opt = app->add_option("--" + key, *holder, "default " + shown);
      flags_.push_back({key, opt, std::move(holder)});
    }
  }

  nlohmann::json resolve() const {
    nlohmann::json merged = defaults_;
    if (!file_.empty()) merge_config(merged, read_config_file(file_));
    for (const auto& f : flags_) {
      if (f.option->count() == 0) continue;
      nlohmann::json typed = defaults_;
      set_config_value(typed, f.key, *f.text);
      std::string pointer = "/" + f.key;
      std::replace(pointer.begin(), pointer.end(), '.', '/');
      merged[nlohmann::json::json_pointer(pointer)] = typed[nlohmann::json::json_pointer(pointer)];
    }
    return merged;
  }

 private:
  static std::string join(const nlohmann::json& arr) {
    std::string s;
    for (const auto& v : arr) s += (s.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
    return s;
  }

  struct Flag {
    std::string key;
    CLI::Option* option;
    std::unique_ptr<std::string> text;
  };
  nlohmann::json defaults_;
  std::string file_;
  std::vector<Flag> flags_;
};

void echo_config(const fs::path& dir, const std::string& name, const nlohmann::json& j) {
  fs::create_directories(dir);
  write_file_atomic(dir / name, j.dump(2) + "\n");
}

/// Manifest for train/evaluate: the configured one, else the prepared cache
/// manifest. Without validation rows, the split is re-applied from the cache's
/// splits.json or derived from the split spec.
DatasetManifest resolve_manifest(const RunConfig& c) {
  const fs::path cache = c.paths.resolved_cache_dir();
  fs::path file = c.paths.manifest;
  if (file.empty()) {
    file = cache / "manifest.csv";
    if (!fs::exists(file)) {
      throw ValidationError("no manifest: set paths.manifest or run `dfd prepare` to create " + file.string());
    }
  }
  const fs::path root = c.paths.data_root.empty() ? file.parent_path() : fs::path(c.paths.data_root);
  DatasetManifest m = load_manifest(file, root, false, true);
  if (m.count(Split::val) == 0) {
    if (fs::exists(cache / "splits.json")) {
      try {
        return apply_splits(m, cache / "splits.json");
      } catch (const ValidationError&) {
        // splits.json belongs to a different manifest; derive instead.
      }
    }
    m = derive_validation_split(m, c.split);
  }
  return m;
}

void print_counts(const DatasetManifest& m) {
  for (Split s : {Split::train, Split::val, Split::test}) {
    std::cout << "  " << to_string(s) << ": " << m.count(s) << " (real " << m.count(s, Label::real) << ", fake "
              << m.count(s, Label::fake) << ")\n";
  }
}

// ---------------------------------------------------------------------------

int cmd_prepare(const ConfigFlags& flags) {
  const nlohmann::json resolved = flags.resolve();
  const RunConfig c = run_config_from_json(resolved);
  require(!c.paths.manifest.empty(), "prepare: paths.manifest is required");
  const fs::path cache = c.paths.resolved_cache_dir();
  echo_config(cache, "prepare.config.json", resolved);

  const DatasetManifest raw = load_manifest(c.paths.manifest, c.paths.resolved_data_root(), true);
  DatasetManifest split;
  if (fs::exists(cache / "splits.json")) {
    split = apply_splits(raw, cache / "splits.json");
  } else {
    split = derive_validation_split(raw, c.split);
    save_splits(split, c.split, cache / "splits.json");
  }
  const DatasetManifest cached = prepare_cache(split, cache, c.preprocess.cache_short_side);
  write_manifest(cached, cache / "manifest.csv");
  std::cout << "prepared " << cached.records.size() << " images in " << cache.string() << "\n";
  print_counts(cached);
  std::cout << "no-skill baseline (test accuracy of predicting " << to_string(train_majority(cached))
            << "): " << format_number(no_skill_baseline(cached)) << "\n";
  return 0;
}

int cmd_train(const ConfigFlags& flags, const std::string& run_dir_flag, bool quiet) {
  const nlohmann::json resolved = flags.resolve();
  const RunConfig c = run_config_from_json(resolved);
  const fs::path run_dir = run_dir_flag.empty()
                               ? fs::path(c.paths.output_dir) / (to_string(c.model.arch) + "-" + to_string(c.model.init) +
                                                                 "-" + to_string(c.train.scheduler) + "-" +
                                                                 format_number(c.train.lr0))
                               : fs::path(run_dir_flag);
  const DatasetManifest manifest = resolve_manifest(c);
  if (fs::exists(run_dir / "config.snapshot")) {
    check_snapshot(run_dir, run_snapshot(c.model, c.preprocess, c.train, manifest));
  }
  echo_config(run_dir, "run_config.json", resolved);

  auto detector = build_detector(c.model);
  TrainOptions options;
  options.run_dir = run_dir;
  options.log = quiet ? nullptr : &std::cout;
  options.after_epoch = [](const EpochRecord&) { return !g_interrupted.load(); };
  const TrainResult r = train(*detector, manifest, c.preprocess, c.train, options);
  if (!r.completed) throw Interrupted("interrupted after epoch " + std::to_string(r.curve.back().epoch) +
                                      "; rerun the same command to resume " + run_dir.string());
  std::cout << "run " << run_dir.string() << ": best epoch " << r.best_epoch << ", best val accuracy "
            << format_number(r.best_val_accuracy) << (r.stopped_early ? " (stopped early)" : "") << "\n";
  return 0;
}

nlohmann::json sweep_defaults() {
  nlohmann::json j = to_json(SweepGrid{});
  j["paths"] = to_json(RunConfig{})["paths"];
  j["paths"]["output_dir"] = "sweep";
  return j;
}

int cmd_sweep(const ConfigFlags& flags, int jobs, bool no_resume, bool quiet) {
  nlohmann::json resolved = flags.resolve();
  nlohmann::json paths_json = resolved.at("paths");
  nlohmann::json grid_json = resolved;
  grid_json.erase("paths");
  const SweepGrid grid = sweep_grid_from_json(grid_json);
  RunConfig paths_only;
  {
    FieldReader pr(paths_json, "paths");
    pr.get("manifest", paths_only.paths.manifest);
    pr.get("data_root", paths_only.paths.data_root);
    pr.get("cache_dir", paths_only.paths.cache_dir);
    pr.get("output_dir", paths_only.paths.output_dir);
    pr.finish();
  }
  paths_only.split = grid.split;
  const fs::path out = paths_only.paths.output_dir;
  const DatasetManifest manifest = resolve_manifest(paths_only);
  echo_config(out, "sweep.config.json", resolved);

  SweepOptions options;
  options.resume = !no_resume;
  options.jobs = jobs;
  options.log = quiet ? nullptr : &std::cout;
  options.trainer = [quiet](const DetectorConfig& model, const TrainConfig& cfg, const PreprocessConfig& pp,
                            const DatasetManifest& m, const fs::path& run_dir) {
    if (g_interrupted) throw Interrupted("sweep interrupted before this cell");
    auto detector = build_detector(model);
    TrainOptions o;
    o.run_dir = run_dir;
    o.restore_best = false;
    o.log = quiet ? nullptr : &std::cout;
    o.after_epoch = [](const EpochRecord&) { return !g_interrupted.load(); };
    return train(*detector, m, pp, cfg, o);
  };
  const auto results = run_sweep(grid, manifest, out, options);
  std::cout << emit_table(results).txt;
  std::size_t done = 0;
  for (const auto& r : results) done += r.status == CellStatus::done ? 1 : 0;
  std::cout << done << "/" << results.size() << " cells done; tables in " << (out / "table1.csv").string() << "\n";
  if (g_interrupted) throw Interrupted("sweep interrupted; rerun the same command to resume");
  return 0;
}

/// Preprocessing used with a checkpoint: its run's snapshot when present,
/// else defaults at the model's input side.
PreprocessConfig preprocess_for(const fs::path& checkpoint, const Detector<float>& det) {
  const fs::path snap = checkpoint.parent_path() / "config.snapshot";
  if (fs::exists(snap)) return preprocess_config_from_json(nlohmann::json::parse(read_file(snap)).at("preprocess"));
  PreprocessConfig pp;
  pp.train_side = pp.eval_side = static_cast<int>(det.config().input_side);
  return pp;
}

DatasetManifest manifest_for(const fs::path& checkpoint, const std::string& manifest_flag, const std::string& root_flag,
                             const std::string& cache_flag) {
  RunConfig c;
  c.paths.cache_dir = cache_flag;
  c.paths.data_root = root_flag;
  if (!manifest_flag.empty()) {
    c.paths.manifest = manifest_flag;
  } else if (fs::exists(checkpoint.parent_path() / "manifest.csv")) {
    c.paths.manifest = (checkpoint.parent_path() / "manifest.csv").string();
  }
  return resolve_manifest(c);
}

struct EvaluateArgs {
  std::string checkpoint, split = "test", out, manifest, data_root, cache_dir;
  double threshold = 0.5;
  int batch_size = 32;
  int bootstrap = 0;
  std::uint64_t bootstrap_seed = 0;
};

int cmd_evaluate(const EvaluateArgs& a) {
  const Split split = parse_split(a.split);
  require(a.threshold >= 0.0 && a.threshold <= 1.0, "--threshold must be in [0, 1]");
  require(a.bootstrap == 0 || a.bootstrap >= 100, "--bootstrap must be 0 or at least 100");
  const fs::path out = a.out.empty() ? fs::path(a.checkpoint).parent_path() / ("eval-" + a.split) : fs::path(a.out);
  nlohmann::json echo = {{"checkpoint", a.checkpoint}, {"split", a.split},         {"threshold", a.threshold},
                         {"manifest", a.manifest},     {"data_root", a.data_root}, {"cache_dir", a.cache_dir},
                         {"batch_size", a.batch_size}, {"bootstrap", a.bootstrap}, {"bootstrap_seed", a.bootstrap_seed}};
  LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const PreprocessConfig pp = preprocess_for(a.checkpoint, *ck.detector);
  echo["preprocess"] = to_json(pp);
  echo["model"] = to_json(ck.detector->config());
  echo_config(out, "evaluate.config.json", echo);

  const DatasetManifest m = manifest_for(a.checkpoint, a.manifest, a.data_root, a.cache_dir);
  const auto records = m.in_split(split);
  require(!records.empty(), "evaluate: the " + a.split + " split is empty");
  const auto scores = score_records(*ck.detector, records, pp, a.batch_size);
  std::vector<ScoredPrediction> preds;
  for (std::size_t i = 0; i < records.size(); ++i) preds.push_back({records[i]->id, scores[i], records[i]->label});
  const EvalReport report = evaluate(preds, a.threshold);

  nlohmann::json extra = {{"split", a.split}, {"checkpoint", a.checkpoint}, {"model", to_json(ck.detector->config())}};
  if (a.bootstrap > 0) {
    nlohmann::json ci = nlohmann::json::object();
    for (MetricKind k : {MetricKind::accuracy, MetricKind::roc_auc, MetricKind::average_precision}) {
      try {
        const Interval iv = bootstrap_ci(preds, k, a.bootstrap, a.bootstrap_seed, a.threshold);
        ci[to_string(k)] = {iv.low, iv.high};
      } catch (const std::exception& e) {
        ci[to_string(k)] = e.what();
      }
    }
    extra["ci95"] = ci;
  }
  write_predictions_csv(preds, out / "predictions.csv");
  write_eval_outputs(report, out, extra);
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string("undefined"); };
  std::cout << a.split << " (" << preds.size() << " images): accuracy " << format_number(report.accuracy) << ", ROC AUC "
            << opt(report.roc_auc) << ", average precision " << opt(report.average_precision)
            << ", recall at precision 1 " << opt(report.recall_at_precision_1) << "\n"
            << "outputs in " << out.string() << "\n";
  return 0;
}

struct GradcamArgs {
  std::string checkpoint, out = "gradcam", manifest, data_root, cache_dir, target = "predicted", colormap = "blue_jet";
  std::vector<std::string> ids, images;
  double blend = 0.5;
};

std::string file_safe(std::string s) {
  std::replace_if(s.begin(), s.end(), [](char c) { return c == '/' || c == '\\' || c == ' '; }, '_');
  return s;
}

int cmd_gradcam(const GradcamArgs& a) {
  require(!a.ids.empty() || !a.images.empty(), "gradcam: give --ids (manifest records) or --image paths");
  const Colormap cmap = parse_colormap(a.colormap);
  std::optional<Label> target;
  if (a.target != "predicted") target = parse_label(a.target);
  require(a.blend >= 0.0 && a.blend <= 1.0, "--blend must be in [0, 1]");

  LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  Detector<float>& det = *ck.detector;
  const PreprocessConfig pp = preprocess_for(a.checkpoint, det);
  const NormalizationStats stats = pp.stats(normalization_source(det.config().init));
  echo_config(a.out, "gradcam.config.json",
              {{"checkpoint", a.checkpoint}, {"ids", a.ids}, {"images", a.images}, {"class", a.target},
               {"colormap", a.colormap}, {"blend", a.blend}, {"preprocess", to_json(pp)}});

  std::vector<std::pair<std::string, fs::path>> items;
  if (!a.ids.empty()) {
    const DatasetManifest m = manifest_for(a.checkpoint, a.manifest, a.data_root, a.cache_dir);
    for (const auto& id : a.ids) {
      auto it = std::find_if(m.records.begin(), m.records.end(), [&](const auto& r) { return r.id == id; });
      require(it != m.records.end(), "gradcam: no record with id '" + id + "'");
      items.emplace_back(id, it->path);
    }
  }
  for (const auto& p : a.images) items.emplace_back(fs::path(p).stem().string(), p);

  const std::string model = to_string(det.config().arch);
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& [id, path] : items) {
    const Image image = read_image(path);
    Tensor<float> x = eval_transform(image, pp, stats);
    const Heatmap h = gradcam(det, x, target);
    denormalize(x, stats);
    const Image view = planar_to_image(x.data(), pp.eval_side, pp.eval_side);
    const std::string stem = file_safe(id) + "." + model;
    const fs::path png = fs::path(a.out) / (stem + "." + to_string(h.target_class) + ".png");
    write_png(overlay(view, h.upsampled, cmap, a.blend), png);
    write_npy(h.raw, fs::path(a.out) / (stem + ".heatmap.npy"));
    const double score = 1.0 / (1.0 + std::exp(h.logits[0] - h.logits[1]));
    summary.push_back({{"id", id}, {"image", path.string()}, {"overlay", png.string()}, {"class", to_string(h.target_class)},
                       {"fake_score", score}, {"all_zero", h.all_zero}, {"layer", h.layer_id}});
    std::cout << id << ": " << to_string(h.target_class) << " (fake score " << format_number(score) << ")"
              << (h.all_zero ? " all-zero heatmap" : "") << " -> " << png.string() << "\n";
  }
  write_file_atomic(fs::path(a.out) / "gradcam.json", summary.dump(2) + "\n");
  return 0;
}

struct ProfileArgs {
  std::vector<std::string> checkpoints, archs;
  std::string init = "random", variant = "standard", weights_dir = "weights", out = "profile";
  int input_side = 256;
  std::vector<int> sides{224};
  int runs = 20, warmup = 3;
  bool no_latency = false;
};

int cmd_profile(const ProfileArgs& a) {
  require(!a.checkpoints.empty() || !a.archs.empty(), "profile: give --checkpoint or --arch");
  ProfileOptions options;
  options.extra_sides = a.sides;
  options.measure = !a.no_latency;
  options.n_runs = a.runs;
  options.n_warmup = a.warmup;
  require(a.no_latency || (a.runs >= 10 && a.warmup >= 3), "profile: --runs must be >= 10 and --warmup >= 3");
  echo_config(a.out, "profile.config.json",
              {{"checkpoints", a.checkpoints}, {"archs", a.archs}, {"init", a.init}, {"variant", a.variant},
               {"weights_dir", a.weights_dir}, {"input_side", a.input_side}, {"sides", a.sides}, {"runs", a.runs},
               {"warmup", a.warmup}, {"latency", !a.no_latency}});

  std::vector<ProfileReport> reports;
  auto run = [&](Detector<float>& det, const std::string& name) {
    ProfileReport r = profile_detector(det, options);
    write_file_atomic(fs::path(a.out) / name / "profile.json", to_json(r).dump(2) + "\n");
    reports.push_back(std::move(r));
  };
  for (const auto& c : a.checkpoints) {
    LoadedCheckpoint ck = load_checkpoint(c);
    run(*ck.detector, file_safe(fs::path(c).parent_path().filename().string() + "-" + fs::path(c).stem().string()));
  }
  std::vector<std::string> archs = a.archs;
  if (archs.size() == 1 && archs[0] == "all") {
    archs.clear();
    for (Architecture x : kArchitectures) archs.push_back(to_string(x));
  }
  for (const auto& name : archs) {
    DetectorConfig cfg;
    cfg.arch = parse_architecture(name);
    cfg.init = parse_init_mode(a.init);
    cfg.variant = parse_variant(a.variant);
    cfg.input_side = a.input_side;
    cfg.weights_dir = a.weights_dir;
    auto det = build_detector(cfg);
    run(*det, name + "-" + a.init);
  }
  const std::string table = format_profile_table(reports);
  write_file_atomic(fs::path(a.out) / "profile_table.txt", table);
  std::cout << table << kFlopConvention << "\n";
  return 0;
}

int cmd_report(const std::string& dir, const std::string& out) {
  const Report r = build_report(dir);
  const fs::path path = write_report(r, out.empty() ? fs::path(dir) / "report" : fs::path(out));
  std::cout << "report written to " << path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deepfake image detection: data preparation, finetuning, sweeps, evaluation, GradCAM, profiling"};
  app.require_subcommand(1);
  app.set_version_flag("--version", git_hash());

  auto* prepare = app.add_subcommand("prepare", "Validate a manifest, derive the validation split, build the resized image cache");
  ConfigFlags prepare_flags(prepare, to_json(RunConfig{}));

  auto* train_cmd = app.add_subcommand("train", "Finetune one detector; reruns resume the run directory");
  ConfigFlags train_flags(train_cmd, to_json(RunConfig{}));
  std::string run_dir;
  bool quiet = false;
  train_cmd->add_option("--run-dir", run_dir, "Run directory (default paths.output_dir/<arch>-<init>-<scheduler>-<lr>)");
  train_cmd->add_flag("--quiet", quiet, "No per-epoch log");

  auto* sweep_cmd = app.add_subcommand("sweep", "Train every grid cell and write table1.csv / table1.txt");
  ConfigFlags sweep_flags(sweep_cmd, sweep_defaults());
  int jobs = 1;
  bool no_resume = false;
  sweep_cmd->add_option("--jobs", jobs, "Cells trained concurrently")->check(CLI::PositiveNumber);
  sweep_cmd->add_flag("--no-resume", no_resume, "Retrain cells already done");
  sweep_cmd->add_flag("--quiet", quiet, "No per-epoch log");

  EvaluateArgs ev;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score a split with a checkpoint: predictions.csv, eval.json, roc.csv, pr.csv");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--split", ev.split, "train, val or test")->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "Output directory (default <checkpoint dir>/eval-<split>)");
  eval_cmd->add_option("--threshold", ev.threshold, "Fake-score cutoff for hard predictions")->capture_default_str();
  eval_cmd->add_option("--manifest", ev.manifest, "Manifest (default: the run's manifest.csv, else the cache manifest)");
  eval_cmd->add_option("--data-root", ev.data_root, "Base for relative manifest paths");
  eval_cmd->add_option("--cache-dir", ev.cache_dir, "Prepared cache directory");
  eval_cmd->add_option("--batch-size", ev.batch_size, "Inference batch size")->capture_default_str()->check(CLI::PositiveNumber);
  eval_cmd->add_option("--bootstrap", ev.bootstrap, "Bootstrap resamples for 95% intervals (0 = off)")->capture_default_str();
  eval_cmd->add_option("--bootstrap-seed", ev.bootstrap_seed, "Bootstrap seed")->capture_default_str();

  GradcamArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcam", "Write GradCAM overlays and raw heatmaps");
  gc_cmd->add_option("--checkpoint", gc.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  gc_cmd->add_option("--ids", gc.ids, "Manifest record ids")->delimiter(',');
  gc_cmd->add_option("--image", gc.images, "Image files (id = file stem)")->check(CLI::ExistingFile);
  gc_cmd->add_option("--out", gc.out, "Output directory")->capture_default_str();
  gc_cmd->add_option("--class", gc.target, "predicted, fake or real")->capture_default_str();
  gc_cmd->add_option("--colormap", gc.colormap, "blue_jet, jet or gray")->capture_default_str();
  gc_cmd->add_option("--blend", gc.blend, "Overlay opacity at full heat")->capture_default_str();
  gc_cmd->add_option("--manifest", gc.manifest, "Manifest for --ids");
  gc_cmd->add_option("--data-root", gc.data_root, "Base for relative manifest paths");
  gc_cmd->add_option("--cache-dir", gc.cache_dir, "Prepared cache directory");

  ProfileArgs pf;
  auto* pf_cmd = app.add_subcommand("profile", "Parameters, GFLOPs and batch-1 latency: profile.json per model and a table");
  pf_cmd->add_option("--checkpoint", pf.checkpoints, "Checkpoint files")->check(CLI::ExistingFile);
  pf_cmd->add_option("--arch", pf.archs, "resnet50, vit_b32, convnext_base or all")->delimiter(',');
  pf_cmd->add_option("--init", pf.init, "random, imagenet or clip (with --arch)")->capture_default_str();
  pf_cmd->add_option("--variant", pf.variant, "standard or tiny (with --arch)")->capture_default_str();
  pf_cmd->add_option("--weights-dir", pf.weights_dir, "Converted pretrained weights")->capture_default_str();
  pf_cmd->add_option("--input-side", pf.input_side, "Model input side (with --arch)")->capture_default_str();
  pf_cmd->add_option("--sides", pf.sides, "Extra input sides to count FLOPs at")->delimiter(',')->capture_default_str();
  pf_cmd->add_option("--runs", pf.runs, "Timed forwards")->capture_default_str();
  pf_cmd->add_option("--warmup", pf.warmup, "Untimed warmup forwards")->capture_default_str();
  pf_cmd->add_flag("--no-latency", pf.no_latency, "Skip latency measurement");
  pf_cmd->add_option("--out", pf.out, "Output directory")->capture_default_str();

  std::string report_dir, report_out;
  auto* rp_cmd = app.add_subcommand("report", "Markdown summary with tables and SVG plots of a sweep, run or evaluation directory");
  rp_cmd->add_option("dir", report_dir, "Sweep, run or results directory")->required();
  rp_cmd->add_option("--out", report_out, "Output directory (default <dir>/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  std::signal(SIGINT, on_sigint);
  try {
    if (*prepare) return cmd_prepare(prepare_flags);
    if (*train_cmd) return cmd_train(train_flags, run_dir, quiet);
    if (*sweep_cmd) return cmd_sweep(sweep_flags, jobs, no_resume, quiet);
    if (*eval_cmd) return cmd_evaluate(ev);
    if (*gc_cmd) return cmd_gradcam(gc);
    if (*pf_cmd) return cmd_profile(pf);
    if (*rp_cmd) return cmd_report(report_dir, report_out);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
