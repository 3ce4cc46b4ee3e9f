#include "dfd/profile.hpp"

#include "dfd/config_fields.hpp"
#include "dfd/system.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace dfd {

template <typename Scalar>
FlopCount count_flops(const nn::Module<Scalar>& module, int input_side) {
  nn::OpCounter ops;
  module.trace({1, 3, input_side, input_side}, ops);
  return {input_side, ops.macs, ops.macs_by_kind};
}

template <typename Scalar>
FlopCount count_flops(Detector<Scalar>& detector, int input_side) {
  nn::OpCounter ops;
  const Shape features = detector.backbone().trace({1, 3, input_side, input_side}, ops);
  detector.head().trace(detector.dropout().trace(features, ops), ops);
  return {input_side, ops.macs, ops.macs_by_kind};
}

LatencyStats measure_latency(const std::function<void()>& run, int n_runs, int n_warmup) {
  require(n_runs >= 10, "latency: n_runs must be at least 10");
  require(n_warmup >= 3, "latency: n_warmup must be at least 3");
  for (int i = 0; i < n_warmup; ++i) run();
  LatencyStats s;
  s.n_runs = n_runs;
  s.n_warmup = n_warmup;
  for (int i = 0; i < n_runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    const auto t1 = std::chrono::steady_clock::now();
    s.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  s.mean_ms = std::accumulate(s.samples_ms.begin(), s.samples_ms.end(), 0.0) / n_runs;
  double ss = 0.0;
  for (double v : s.samples_ms) ss += (v - s.mean_ms) * (v - s.mean_ms);
  s.std_ms = std::sqrt(ss / (n_runs - 1));
  return s;
}

LatencyStats measure_latency(Detector<float>& detector, int n_runs, int n_warmup) {
  const Index side = detector.config().input_side;
  Tensor<float> x({1, 3, side, side});
  std::mt19937_64 rng(7);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (Index i = 0; i < x.size(); ++i) x[i] = dist(rng);
  detector.set_mode(false);
  detector.set_recording(false);
  volatile float sink = 0.0f;
  return measure_latency([&] { sink = sink + detector.forward(x)[0]; }, n_runs, n_warmup);
}

ProfileReport profile_detector(Detector<float>& detector, const ProfileOptions& options) {
  ProfileReport r;
  const DetectorConfig& cfg = detector.config();
  r.arch = cfg.arch;
  r.model = to_string(cfg.arch) + "/" + to_string(cfg.init) + (cfg.variant == ModelVariant::tiny ? "/tiny" : "");
  const ParameterCounts counts = detector.parameter_counts();
  r.params_total = counts.total;
  r.params_trainable = counts.trainable;
  r.input_side = static_cast<int>(cfg.input_side);

  const FlopCount own = count_flops(detector, r.input_side);
  r.gflops = own.gflops();
  r.macs_by_kind = own.macs_by_kind;
  r.gflops_by_side[r.input_side] = r.gflops;
  for (int side : options.extra_sides) {
    if (side == r.input_side) continue;
    // Positional embeddings fix the token grid, so other sides get their own backbone.
    const auto backbone = make_backbone<float>(cfg.arch, cfg.variant, side);
    nn::OpCounter ops;
    detector.head().trace(detector.dropout().trace(backbone->trace({1, 3, side, side}, ops), ops), ops);
    r.gflops_by_side[side] = FlopCount{side, ops.macs, ops.macs_by_kind}.gflops();
  }

  r.hardware = hardware_descriptor();
  if (options.measure) r.latency = measure_latency(detector, options.n_runs, options.n_warmup);

  const LoadReport& load = detector.pretrained_report;
  if (!load.missing.empty() || !load.unexpected.empty() || !load.shape_mismatch.empty()) {
    r.notes.push_back("pretrained checkpoint covers " + std::to_string(load.matched.size()) + " tensors; " +
                      std::to_string(load.missing.size()) + " missing (randomly initialized), " +
                      std::to_string(load.unexpected.size()) + " unused, " + std::to_string(load.shape_mismatch.size()) +
                      " shape-mismatched");
  }
  if (!load.resized.empty()) {
    r.notes.push_back("positional embedding resampled to the " + std::to_string(r.input_side) + " px token grid");
  }
  return r;
}

nlohmann::json to_json(const ProfileReport& r) {
  nlohmann::json by_side = nlohmann::json::object();
  for (const auto& [side, g] : r.gflops_by_side) by_side[std::to_string(side)] = g;
  nlohmann::json j = {{"model", r.model},
                      {"arch", to_string(r.arch)},
                      {"params_total", r.params_total},
                      {"params_trainable", r.params_trainable},
                      {"params_millions", r.params_millions()},
                      {"input_side", r.input_side},
                      {"gflops", r.gflops},
                      {"gflops_by_input_side", by_side},
                      {"macs_by_kind", r.macs_by_kind},
                      {"flop_convention", r.flop_convention},
                      {"batch_size", r.batch_size},
                      {"hardware", r.hardware},
                      {"latency_includes_preprocessing", r.latency_includes_preprocessing},
                      {"notes", r.notes}};
  if (r.latency) {
    j["latency_ms_mean"] = r.latency->mean_ms;
    j["latency_ms_std"] = r.latency->std_ms;
    j["n_runs"] = r.latency->n_runs;
    j["n_warmup"] = r.latency->n_warmup;
  }
  return j;
}

std::string format_profile_table(const std::vector<ProfileReport>& reports) {
  std::set<int> sides;
  for (const auto& r : reports) {
    for (const auto& [s, g] : r.gflops_by_side) sides.insert(s);
  }
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"Model", "Params (M)"};
  for (int s : sides) header.push_back("GFLOPs@" + std::to_string(s));
  header.push_back("Latency ms (mean +- sd)");
  rows.push_back(header);
  auto fixed = [](double v, int p) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(p) << v;
    return o.str();
  };
  for (const auto& r : reports) {
    std::vector<std::string> row{r.model, fixed(r.params_millions(), 2)};
    for (int s : sides) {
      auto it = r.gflops_by_side.find(s);
      row.push_back(it == r.gflops_by_side.end() ? "-" : fixed(it->second, 2));
    }
    row.push_back(r.latency ? fixed(r.latency->mean_ms, 2) + " +- " + fixed(r.latency->std_ms, 2) : "-");
    rows.push_back(row);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::ostringstream out;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    for (std::size_t i = 0; i < rows[k].size(); ++i) {
      out << (i ? "  " : "") << (i == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[i])) << rows[k][i];
    }
    out << '\n';
    if (k == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out << std::string(total - 2, '-') << '\n';
    }
  }
  if (!reports.empty()) out << "hardware: " << reports.front().hardware << "; batch size 1; preprocessing excluded\n";
  return out.str();
}

template FlopCount count_flops<float>(const nn::Module<float>&, int);
template FlopCount count_flops<double>(const nn::Module<double>&, int);
template FlopCount count_flops<float>(Detector<float>&, int);
template FlopCount count_flops<double>(Detector<double>&, int);

}  // namespace dfd
