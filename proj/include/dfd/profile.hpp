#pragma once

#include "dfd/model.hpp"

#include <functional>
#include <optional>
#include <map>
#include <string>
#include <vector>

namespace dfd {

inline constexpr const char* kFlopConvention =
    "GFLOPs = 2 x multiply-accumulates / 1e9; convolutions, affine maps and attention products count, "
    "normalization, activations and pooling count zero";

struct FlopCount {
  int input_side = 0;
  std::uint64_t macs = 0;
  std::map<std::string, std::uint64_t> macs_by_kind;

  double gflops() const { return 2.0 * static_cast<double>(macs) / 1e9; }
};

/// Shape-only count for one [1, 3, side, side] forward of any module.
template <typename Scalar>
FlopCount count_flops(const nn::Module<Scalar>& module, int input_side);

/// Backbone + head of a detector at an arbitrary square input side.
template <typename Scalar>
FlopCount count_flops(Detector<Scalar>& detector, int input_side);

struct LatencyStats {
  double mean_ms = 0.0;
  double std_ms = 0.0;  // sample standard deviation
  int n_runs = 0;
  int n_warmup = 0;
  std::vector<double> samples_ms;
};

/// Times `run` n_runs times after n_warmup untimed calls. Requires
/// n_runs >= 10 and n_warmup >= 3.
LatencyStats measure_latency(const std::function<void()>& run, int n_runs, int n_warmup);

/// Batch-1 eval-mode forward on a fixed random input at the detector's input
/// side. Excludes image decoding and preprocessing.
LatencyStats measure_latency(Detector<float>& detector, int n_runs, int n_warmup);

struct ProfileReport {
  std::string model;  // e.g. "convnext_base/clip"
  Architecture arch = Architecture::resnet50;
  std::int64_t params_total = 0;
  std::int64_t params_trainable = 0;
  int input_side = 0;
  double gflops = 0.0;  // at input_side
  std::map<int, double> gflops_by_side;
  std::map<std::string, std::uint64_t> macs_by_kind;
  std::string flop_convention = kFlopConvention;
  std::optional<LatencyStats> latency;
  int batch_size = 1;
  std::string hardware;
  bool latency_includes_preprocessing = false;
  std::vector<std::string> notes;

  double params_millions() const { return static_cast<double>(params_total) / 1e6; }
};

struct ProfileOptions {
  /// Extra sides to count FLOPs at besides the detector's own.
  std::vector<int> extra_sides{224};
  bool measure = true;
  int n_runs = 20;
  int n_warmup = 3;
};

ProfileReport profile_detector(Detector<float>& detector, const ProfileOptions& options = {});

nlohmann::json to_json(const ProfileReport& r);
/// Aligned text table: model, params, GFLOPs per side, latency.
std::string format_profile_table(const std::vector<ProfileReport>& reports);

}  // namespace dfd
