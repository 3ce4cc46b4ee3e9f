#include "dfd/train.hpp"

#include "dfd/archive.hpp"
#include "dfd/csv.hpp"
#include "dfd/optim.hpp"
#include "dfd/system.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <future>
#include <numeric>
#include <random>
#include <sstream>

namespace dfd {
namespace fs = std::filesystem;

std::string to_string(SchedulerKind k) { return k == SchedulerKind::step ? "step" : "cosine"; }

SchedulerKind parse_scheduler(const std::string& s) {
  if (s == "step") return SchedulerKind::step;
  if (s == "cosine") return SchedulerKind::cosine;
  throw ValidationError("unknown scheduler '" + s + "' (expected step or cosine)");
}

void TrainConfig::validate() const {
  require(lr0 > 0.0 && std::isfinite(lr0), "train.lr0 must be positive");
  require(weight_decay >= 0.0, "train.weight_decay must be nonnegative");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
          "train.adam_beta1/adam_beta2 must be in [0, 1)");
  require(adam_eps > 0.0, "train.adam_eps must be positive");
  require(batch_size >= 1, "train.batch_size must be at least 1");
  require(max_epochs >= 1, "train.max_epochs must be at least 1");
  require(patience >= 1 && patience <= max_epochs, "train.patience must be in [1, max_epochs]");
  require(prefetch >= 0 && prefetch <= 16, "train.prefetch must be in [0, 16]");
  try {
    std::visit([](const auto& s) { s.validate(); }, schedule());
  } catch (const std::invalid_argument& e) {
    throw ValidationError(std::string("train scheduler: ") + e.what());
  }
}

Schedule TrainConfig::schedule() const {
  if (scheduler == SchedulerKind::step) return StepDecaySchedule{lr0, step_factor, step_period};
  return CosineWarmRestartSchedule{lr0, cosine_eta_min.value_or(lr0 / 100.0), cosine_t0, cosine_t_mult};
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},
          {"scheduler", to_string(c.scheduler)},
          {"step_factor", c.step_factor},
          {"step_period", c.step_period},
          {"cosine_eta_min", c.cosine_eta_min ? nlohmann::json(*c.cosine_eta_min) : nlohmann::json()},
          {"cosine_t0", c.cosine_t0},
          {"cosine_t_mult", c.cosine_t_mult},
          {"weight_decay", c.weight_decay},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"seed", c.seed},
          {"prefetch", c.prefetch}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  FieldReader r(j, "train");
  r.get("lr0", c.lr0);
  std::string sched = to_string(c.scheduler);
  if (r.get("scheduler", sched)) c.scheduler = parse_scheduler(sched);
  r.get("step_factor", c.step_factor);
  r.get("step_period", c.step_period);
  if (const auto* eta = r.child("cosine_eta_min"); eta && !eta->is_null()) {
    if (!eta->is_number()) throw ValidationError("train.cosine_eta_min: expected a number or null");
    c.cosine_eta_min = eta->get<double>();
  }
  r.get("cosine_t0", c.cosine_t0);
  r.get("cosine_t_mult", c.cosine_t_mult);
  r.get("weight_decay", c.weight_decay);
  r.get("adam_beta1", c.adam_beta1);
  r.get("adam_beta2", c.adam_beta2);
  r.get("adam_eps", c.adam_eps);
  r.get("batch_size", c.batch_size);
  r.get("max_epochs", c.max_epochs);
  r.get("patience", c.patience);
  r.get("seed", c.seed);
  r.get("prefetch", c.prefetch);
  r.finish();
  c.validate();
  return c;
}

namespace {

nlohmann::json to_json(const EpochRecord& e) {
  return {{"epoch", e.epoch},       {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
          {"val_accuracy", e.val_accuracy}, {"lr", e.lr}, {"train_accuracy", e.train_accuracy}};
}

EpochRecord epoch_from_json(const nlohmann::json& j) {
  EpochRecord e;
  e.epoch = j.at("epoch");
  e.train_loss = j.at("train_loss");
  e.val_loss = j.at("val_loss");
  e.val_accuracy = j.at("val_accuracy");
  e.lr = j.at("lr");
  e.train_accuracy = j.value("train_accuracy", 0.0);
  return e;
}

nlohmann::json to_json(const EarlyStopState& s) {
  return {{"patience", s.patience},
          {"best_metric", s.best_metric ? nlohmann::json(*s.best_metric) : nlohmann::json()},
          {"best_epoch", s.best_epoch},
          {"epochs_since_improvement", s.epochs_since_improvement},
          {"best_secondary", s.best_secondary ? nlohmann::json(*s.best_secondary) : nlohmann::json()}};
}

EarlyStopState early_stop_from_json(const nlohmann::json& j) {
  EarlyStopState s;
  s.patience = j.at("patience");
  if (!j.at("best_metric").is_null()) s.best_metric = j["best_metric"].get<double>();
  s.best_epoch = j.at("best_epoch");
  s.epochs_since_improvement = j.at("epochs_since_improvement");
  if (!j.at("best_secondary").is_null()) s.best_secondary = j["best_secondary"].get<double>();
  return s;
}

struct Batch {
  Tensor<float> x;
  std::vector<int> y;
};

Batch make_batch(const std::vector<const LabeledImage*>& records, const std::vector<std::size_t>& order, std::size_t begin,
                 std::size_t end, int side, const std::function<Tensor<float>(const Image&, std::size_t)>& transform) {
  Batch b;
  const Index n = static_cast<Index>(end - begin);
  const Index plane = 3 * static_cast<Index>(side) * side;
  b.x = Tensor<float>({n, 3, side, side});
  for (std::size_t p = begin; p < end; ++p) {
    const LabeledImage& r = *records[order[p]];
    Image img;
    try {
      img = read_image(r.path);
    } catch (const ImageError& e) {
      throw std::runtime_error("record '" + r.id + "': " + e.what());
    }
    const Tensor<float> t = transform(img, p);
    b.x.array().segment(static_cast<Index>(p - begin) * plane, plane) = t.array();
    b.y.push_back(static_cast<int>(r.label));
  }
  return b;
}

/// Batches in order, with up to `ahead` prepared concurrently.
class BatchStream {
 public:
  BatchStream(std::size_t count, std::size_t batch_size, int ahead, std::function<Batch(std::size_t, std::size_t)> make)
      : count_(count), batch_size_(batch_size), ahead_(static_cast<std::size_t>(ahead)), make_(std::move(make)) {}

  std::size_t batches() const { return (count_ + batch_size_ - 1) / batch_size_; }

  Batch next() {
    if (ahead_ == 0) return make_at(next_++);
    while (queue_.size() < ahead_ + 1 && issued_ < batches()) {
      const std::size_t k = issued_++;
      queue_.push_back(std::async(std::launch::async, [this, k] { return make_at(k); }));
    }
    Batch b = queue_.front().get();
    queue_.pop_front();
    ++next_;
    return b;
  }

  ~BatchStream() {
    for (auto& f : queue_) {
      if (f.valid()) f.wait();
    }
  }

 private:
  Batch make_at(std::size_t k) {
    const std::size_t begin = k * batch_size_;
    return make_(begin, std::min(count_, begin + batch_size_));
  }

  std::size_t count_, batch_size_, ahead_;
  std::function<Batch(std::size_t, std::size_t)> make_;
  std::deque<std::future<Batch>> queue_;
  std::size_t issued_ = 0, next_ = 0;
};

struct ValStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

ValStats validate_epoch(Detector<float>& det, const std::vector<const LabeledImage*>& val, const PreprocessConfig& pp,
                        const NormalizationStats& stats, const TrainConfig& cfg) {
  std::vector<std::size_t> order(val.size());
  std::iota(order.begin(), order.end(), 0);
  BatchStream stream(val.size(), static_cast<std::size_t>(cfg.batch_size), cfg.prefetch, [&](std::size_t b, std::size_t e) {
    return make_batch(val, order, b, e, pp.eval_side,
                      [&](const Image& img, std::size_t) { return eval_transform(img, pp, stats); });
  });
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t k = 0; k < stream.batches(); ++k) {
    const Batch b = stream.next();
    const Tensor<float> logits = det.logits(b.x, false);
    loss += cross_entropy(logits, b.y).loss * static_cast<double>(b.y.size());
    const auto scores = fake_scores(logits);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      correct += ((scores[i] >= 0.5 ? 1 : 0) == b.y[i]) ? 1 : 0;
    }
  }
  const double n = static_cast<double>(val.size());
  return {loss / n, static_cast<double>(correct) / n};
}

/// Copies of every tensor training can change (unfrozen parameters and buffers).
using WeightSnapshot = std::vector<std::pair<nn::Parameter<float>*, ArrayX<float>>>;

WeightSnapshot snapshot_weights(Detector<float>& det) {
  WeightSnapshot out;
  for (auto& [name, p] : det.named_parameters()) {
    if (!p->frozen) out.emplace_back(p, p->value.array());
  }
  return out;
}

void restore_weights(const WeightSnapshot& snap) {
  for (const auto& [p, values] : snap) p->value.array() = values;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError("corrupt " + path.string() + ": " + e.what());
  }
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

}  // namespace

nlohmann::json to_json(const TrainResult& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& e : r.curve) curve.push_back(to_json(e));
  return {{"curve", curve},
          {"best_epoch", r.best_epoch},
          {"best_val_accuracy", r.best_val_accuracy},
          {"best_checkpoint", r.best_checkpoint.string()},
          {"stopped_early", r.stopped_early},
          {"completed", r.completed},
          {"wall_time", r.wall_time}};
}

TrainResult train_result_from_json(const nlohmann::json& j) {
  TrainResult r;
  for (const auto& e : j.at("curve")) r.curve.push_back(epoch_from_json(e));
  r.best_epoch = j.at("best_epoch");
  r.best_val_accuracy = j.at("best_val_accuracy");
  r.best_checkpoint = j.at("best_checkpoint").get<std::string>();
  r.stopped_early = j.at("stopped_early");
  r.completed = j.value("completed", true);
  r.wall_time = j.at("wall_time");
  return r;
}

nlohmann::json run_snapshot(const DetectorConfig& model, const PreprocessConfig& pp, const TrainConfig& cfg,
                            const DatasetManifest& manifest) {
  return {{"model", to_json(model)},
          {"preprocess", to_json(pp)},
          {"train", to_json(cfg)},
          {"data", {{"records", manifest.records.size()}, {"splits_hash", splits_hash(manifest)}}}};
}

void check_snapshot(const fs::path& run_dir, const nlohmann::json& snapshot) {
  const nlohmann::json stored = read_json(run_dir / "config.snapshot");
  if (stored == snapshot) return;
  std::string keys;
  for (const auto& op : nlohmann::json::diff(stored, snapshot)) {
    if (!keys.empty()) keys += ", ";
    keys += op.at("path").get<std::string>();
  }
  throw ValidationError("config mismatch with existing run " + run_dir.string() + " (" + keys + ")");
}

void write_curve_csv(const std::vector<EpochRecord>& curve, const fs::path& path) {
  std::string out = "epoch,train_loss,val_loss,val_acc,lr,train_acc\n";
  for (const auto& e : curve) {
    out += std::to_string(e.epoch) + "," + format_number(e.train_loss) + "," + format_number(e.val_loss) + "," +
           format_number(e.val_accuracy) + "," + format_number(e.lr) + "," + format_number(e.train_accuracy) + "\n";
  }
  write_file_atomic(path, out);
}

std::vector<EpochRecord> read_curve_csv(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = parse_csv_line(line);
    if (f.size() < 5) throw ValidationError(path.string() + ": malformed curve row '" + line + "'");
    EpochRecord e;
    e.epoch = std::stoi(f[0]);
    e.train_loss = std::stod(f[1]);
    e.val_loss = std::stod(f[2]);
    e.val_accuracy = std::stod(f[3]);
    e.lr = std::stod(f[4]);
    if (f.size() > 5) e.train_accuracy = std::stod(f[5]);
    out.push_back(e);
  }
  return out;
}

std::vector<double> score_records(Detector<float>& detector, const std::vector<const LabeledImage*>& records,
                                  const PreprocessConfig& pp, int batch_size) {
  const NormalizationStats stats = pp.stats(normalization_source(detector.config().init));
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> scores;
  scores.reserve(records.size());
  for (std::size_t b = 0; b < records.size(); b += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(records.size(), b + static_cast<std::size_t>(batch_size));
    const Batch batch = make_batch(records, order, b, e, pp.eval_side,
                                   [&](const Image& img, std::size_t) { return eval_transform(img, pp, stats); });
    for (double s : predict_scores(detector, batch.x)) scores.push_back(s);
  }
  return scores;
}

TrainResult train(Detector<float>& detector, const DatasetManifest& manifest, const PreprocessConfig& pp,
                  const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  pp.validate();
  const auto train_set = manifest.in_split(Split::train);
  const auto val_set = manifest.in_split(Split::val);
  require(!train_set.empty(), "train: the train split is empty");
  require(!val_set.empty(), "train: the validation split is empty (derive it first)");
  const Index side = detector.config().input_side;
  require(pp.train_side == side && pp.eval_side == side,
          "train: preprocess train_side/eval_side (" + std::to_string(pp.train_side) + "/" + std::to_string(pp.eval_side) +
              ") must equal the detector input side " + std::to_string(side));

  const auto started = std::chrono::steady_clock::now();
  const NormalizationStats stats = pp.stats(normalization_source(detector.config().init));
  const Schedule schedule = cfg.schedule();
  Adam<float> adam(detector.trainable_parameters(),
                   {cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay});

  TrainResult result;
  EarlyStopState es;
  es.patience = cfg.patience;
  int first_epoch = 0;
  double prior_wall = 0.0;
  WeightSnapshot best_weights;

  const std::optional<fs::path>& dir = options.run_dir;
  if (dir) {
    const nlohmann::json snapshot = run_snapshot(detector.config(), pp, cfg, manifest);
    result.best_checkpoint = *dir / "best.ckpt";
    if (fs::exists(*dir / "config.snapshot")) {
      check_snapshot(*dir, snapshot);
      if (fs::exists(*dir / "result.json")) {
        TrainResult done = train_result_from_json(read_json(*dir / "result.json"));
        if (options.restore_best) load_state(detector, load_archive(done.best_checkpoint));
        return done;
      }
      if (fs::exists(*dir / "last.ckpt")) {
        const TensorArchive last = load_archive(*dir / "last.ckpt");
        const LoadReport report = load_state(detector, last);
        if (!report.complete()) throw ArchiveError(dir->string() + "/last.ckpt: corrupt snapshot");
        const nlohmann::json& extra = last.meta.at("extra");
        adam.load_state(last, extra.at("adam_steps").get<std::int64_t>());
        es = early_stop_from_json(extra.at("early_stop"));
        for (const auto& e : extra.at("curve")) result.curve.push_back(epoch_from_json(e));
        first_epoch = extra.at("epoch").get<int>() + 1;
        prior_wall = extra.at("wall_time");
      }
    } else {
      fs::create_directories(*dir);
      write_manifest(manifest, *dir / "manifest.csv");
      write_json(*dir / "config.snapshot", snapshot);
    }
  }

  auto write_meta = [&](const std::string& status, double wall) {
    if (!dir) return;
    write_json(*dir / "meta.json", {{"seed", cfg.seed},
                                    {"hardware", hardware_descriptor()},
                                    {"git_hash", git_hash()},
                                    {"wall_time", wall},
                                    {"epochs_completed", result.curve.size()},
                                    {"status", status}});
  };
  auto elapsed = [&] {
    return prior_wall + std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };
  auto finish = [&](bool completed) {
    result.completed = completed;
    result.best_epoch = es.best_epoch;
    result.best_val_accuracy = 0.0;
    for (const auto& e : result.curve) result.best_val_accuracy = std::max(result.best_val_accuracy, e.val_accuracy);
    result.wall_time = elapsed();
    if (dir) {
      write_meta(completed ? "completed" : "interrupted", result.wall_time);
      if (completed) write_json(*dir / "result.json", to_json(result));
    }
    if (options.restore_best && completed && es.best_epoch >= 0) {
      if (dir) {
        load_state(detector, load_archive(result.best_checkpoint));
      } else {
        restore_weights(best_weights);
      }
    }
    return result;
  };

  if (!result.curve.empty() && first_epoch >= cfg.max_epochs) return finish(true);
  write_meta("running", elapsed());

  for (int epoch = first_epoch; epoch < cfg.max_epochs; ++epoch) {
    const double lr = lr_at(schedule, epoch);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    detector.dropout().reseed(mix_seed(cfg.seed ^ 0x64726f70ULL, static_cast<std::uint64_t>(epoch)));
    const std::uint64_t crop_seed = mix_seed(cfg.seed ^ 0x63726f70ULL, static_cast<std::uint64_t>(epoch));

    BatchStream stream(train_set.size(), static_cast<std::size_t>(cfg.batch_size), cfg.prefetch,
                       [&](std::size_t b, std::size_t e) {
                         return make_batch(train_set, order, b, e, pp.train_side, [&](const Image& img, std::size_t pos) {
                           std::mt19937_64 rng(mix_seed(crop_seed, pos));
                           return train_transform(img, rng, pp, stats);
                         });
                       });
    detector.set_mode(true);
    detector.set_recording(true);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t k = 0; k < stream.batches(); ++k) {
      const Batch b = stream.next();
      adam.zero_grad();
      const Tensor<float> logits = detector.forward(b.x);
      const LossAndGrad<float> lg = cross_entropy(logits, b.y);
      if (!std::isfinite(lg.loss)) {
        detector.set_recording(false);
        write_meta("diverged", elapsed());
        throw TrainingDiverged("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(k) + " (lr " + fmt(lr) + "); run state kept at the last completed epoch");
      }
      detector.backward(lg.grad);
      adam.step(lr);
      loss_sum += lg.loss * static_cast<double>(b.y.size());
      const auto scores = fake_scores(logits);
      for (std::size_t i = 0; i < scores.size(); ++i) correct += ((scores[i] >= 0.5 ? 1 : 0) == b.y[i]) ? 1 : 0;
    }
    detector.set_recording(false);

    const ValStats val = validate_epoch(detector, val_set, pp, stats, cfg);
    if (!std::isfinite(val.loss)) {
      write_meta("diverged", elapsed());
      throw TrainingDiverged("non-finite validation loss at epoch " + std::to_string(epoch) + " (lr " + fmt(lr) + ")");
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.val_loss = val.loss;
    rec.val_accuracy = val.accuracy;
    rec.lr = lr;
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_set.size());
    result.curve.push_back(rec);

    const EarlyStopStep step = early_stop_update(es, epoch, rec.val_accuracy, MetricMode::maximize, rec.val_loss);
    es = step.state;
    if (step.improved) {
      if (dir) {
        save_checkpoint(detector, *dir / "best.ckpt",
                        {{"epoch", epoch}, {"val_accuracy", rec.val_accuracy}, {"val_loss", rec.val_loss}});
      } else if (options.restore_best) {
        best_weights = snapshot_weights(detector);
      }
    }
    if (dir) {
      nlohmann::json curve = nlohmann::json::array();
      for (const auto& e : result.curve) curve.push_back(to_json(e));
      save_checkpoint(detector, *dir / "last.ckpt",
                      {{"epoch", epoch},
                       {"adam_steps", adam.steps()},
                       {"early_stop", to_json(es)},
                       {"curve", curve},
                       {"wall_time", elapsed()}},
                      adam.state_tensors());
      write_curve_csv(result.curve, *dir / "curve.csv");
      write_meta("running", elapsed());
    }
    if (options.log) {
      *options.log << "epoch " << epoch << "  lr " << fmt(lr) << "  train_loss " << fmt(rec.train_loss) << "  train_acc "
                   << fmt(rec.train_accuracy) << "  val_loss " << fmt(rec.val_loss) << "  val_acc "
                   << fmt(rec.val_accuracy) << (step.improved ? "  *" : "") << std::endl;
    }
    if (step.stop) {
      result.stopped_early = true;
      return finish(true);
    }
    if (options.after_epoch && !options.after_epoch(rec)) return finish(epoch + 1 >= cfg.max_epochs);
  }
  return finish(true);
}

TrainResult resume(const fs::path& run_dir, const TrainOptions& options) {
  const fs::path snap_path = run_dir / "config.snapshot";
  if (!fs::exists(snap_path)) throw ValidationError(run_dir.string() + " is not a run directory (no config.snapshot)");
  const nlohmann::json snap = read_json(snap_path);
  const PreprocessConfig pp = preprocess_config_from_json(snap.at("preprocess"));
  const TrainConfig cfg = train_config_from_json(snap.at("train"));
  const DetectorConfig model = detector_config_from_json(snap.at("model"));
  const DatasetManifest manifest = load_manifest(run_dir / "manifest.csv", run_dir, false, true);

  std::unique_ptr<Detector<float>> detector;
  if (fs::exists(run_dir / "last.ckpt")) {
    detector = load_checkpoint(run_dir / "last.ckpt").detector;
  } else {
    detector = build_detector(model);
  }
  TrainOptions opts = options;
  opts.run_dir = run_dir;
  return train(*detector, manifest, pp, cfg, opts);
}

}  // namespace dfd
