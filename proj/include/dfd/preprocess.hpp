#pragma once

#include "dfd/image.hpp"
#include "dfd/tensor.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <random>
#include <string>

namespace dfd {

struct NormalizationStats {
  std::array<float, 3> mean{};
  std::array<float, 3> std{};
  std::string source;

  static NormalizationStats imagenet();
  static NormalizationStats clip();
  static NormalizationStats from_source(const std::string& source);
};

/// How the random crop fraction u is applied: crop side = u * short side, or
/// crop area = u * short side^2.
enum class CropMode { side, area };

struct PreprocessConfig {
  int cache_short_side = 384;
  double crop_low = 0.5;
  double crop_high = 1.0;
  CropMode crop_mode = CropMode::side;
  int train_side = 256;
  int eval_side = 256;
  /// "auto" follows the detector's initialization; or "imagenet" / "clip".
  std::string normalization = "auto";

  void validate() const;
  NormalizationStats stats(const std::string& model_source) const;
};

nlohmann::json to_json(const PreprocessConfig& c);
PreprocessConfig preprocess_config_from_json(const nlohmann::json& j);

/// Downscales so the short side equals `short_side`; images already at or
/// below it pass through unchanged.
Image cache_resize(const Image& image, int short_side);

struct CropWindow {
  int x0, y0, side;
};

/// Draws the random square crop used by train_transform.
CropWindow sample_crop(int width, int height, std::mt19937_64& rng, const PreprocessConfig& cfg);

/// Random square crop, resize to train_side, scale to [0, 1], normalize.
/// Output [3, train_side, train_side].
Tensor<float> train_transform(const Image& image, std::mt19937_64& rng, const PreprocessConfig& cfg,
                              const NormalizationStats& stats);

/// Resize short side to eval_side, center crop, normalize.
Tensor<float> eval_transform(const Image& image, const PreprocessConfig& cfg, const NormalizationStats& stats);

/// Center-crop offsets (x0, y0) after resizing the short side to `side`.
std::pair<int, int> eval_crop_offsets(int width, int height, int side);

/// (x - mean) / std per channel, in place on a [3, H, W] tensor.
void normalize(Tensor<float>& chw, const NormalizationStats& stats);
void denormalize(Tensor<float>& chw, const NormalizationStats& stats);

inline constexpr const char* kCacheInterpolation = "bilinear_half_pixel_no_antialias";

}  // namespace dfd
