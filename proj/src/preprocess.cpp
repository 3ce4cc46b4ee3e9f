#include "dfd/preprocess.hpp"

#include "dfd/config_fields.hpp"

#include <algorithm>
#include <cmath>

namespace dfd {

NormalizationStats NormalizationStats::imagenet() {
  return {{0.485f, 0.456f, 0.406f}, {0.229f, 0.224f, 0.225f}, "imagenet"};
}

NormalizationStats NormalizationStats::clip() {
  return {{0.48145466f, 0.4578275f, 0.40821073f}, {0.26862954f, 0.26130258f, 0.27577711f}, "clip"};
}

NormalizationStats NormalizationStats::from_source(const std::string& source) {
  if (source == "imagenet") return imagenet();
  if (source == "clip") return clip();
  throw ValidationError("unknown normalization '" + source + "' (expected imagenet or clip)");
}

void PreprocessConfig::validate() const {
  require(cache_short_side > 0 && train_side > 0 && eval_side > 0, "preprocess: pixel sizes must be positive");
  require(crop_low > 0.0 && crop_low <= crop_high && crop_high <= 1.0,
          "preprocess: crop range must satisfy 0 < low <= high <= 1");
  require(normalization == "auto" || normalization == "imagenet" || normalization == "clip",
          "preprocess.normalization must be auto, imagenet or clip");
}

NormalizationStats PreprocessConfig::stats(const std::string& model_source) const {
  return NormalizationStats::from_source(normalization == "auto" ? model_source : normalization);
}

nlohmann::json to_json(const PreprocessConfig& c) {
  return {{"cache_short_side", c.cache_short_side},
          {"crop_low", c.crop_low},
          {"crop_high", c.crop_high},
          {"crop_mode", c.crop_mode == CropMode::side ? "side" : "area"},
          {"train_side", c.train_side},
          {"eval_side", c.eval_side},
          {"normalization", c.normalization}};
}

PreprocessConfig preprocess_config_from_json(const nlohmann::json& j) {
  PreprocessConfig c;
  FieldReader r(j, "preprocess");
  r.get("cache_short_side", c.cache_short_side);
  r.get("crop_low", c.crop_low);
  r.get("crop_high", c.crop_high);
  std::string mode;
  if (r.get("crop_mode", mode)) {
    require(mode == "side" || mode == "area", "preprocess.crop_mode must be side or area");
    c.crop_mode = mode == "side" ? CropMode::side : CropMode::area;
  }
  r.get("train_side", c.train_side);
  r.get("eval_side", c.eval_side);
  r.get("normalization", c.normalization);
  r.finish();
  c.validate();
  return c;
}

Image cache_resize(const Image& image, int short_side) {
  if (image.width <= 0 || image.height <= 0) throw ImageError("cache_resize: empty image");
  const int s = image.short_side();
  if (s <= short_side) return image;
  const double scale = static_cast<double>(short_side) / s;
  const int w = image.width == s ? short_side : static_cast<int>(std::lround(image.width * scale));
  const int h = image.height == s ? short_side : static_cast<int>(std::lround(image.height * scale));
  return resize_bilinear(image, w, h);
}

CropWindow sample_crop(int width, int height, std::mt19937_64& rng, const PreprocessConfig& cfg) {
  const int s = std::min(width, height);
  std::uniform_real_distribution<double> frac(cfg.crop_low, cfg.crop_high);
  const double u = frac(rng);
  const double f = cfg.crop_mode == CropMode::side ? u : std::sqrt(u);
  const int side = std::clamp(static_cast<int>(std::lround(f * s)), 1, s);
  std::uniform_int_distribution<int> px(0, width - side), py(0, height - side);
  const int x0 = px(rng);
  const int y0 = py(rng);
  return {x0, y0, side};
}

void normalize(Tensor<float>& chw, const NormalizationStats& stats) {
  const Index plane = chw.size() / 3;
  for (int c = 0; c < 3; ++c) {
    chw.array().segment(c * plane, plane) = (chw.array().segment(c * plane, plane) - stats.mean[c]) / stats.std[c];
  }
}

void denormalize(Tensor<float>& chw, const NormalizationStats& stats) {
  const Index plane = chw.size() / 3;
  for (int c = 0; c < 3; ++c) {
    chw.array().segment(c * plane, plane) = chw.array().segment(c * plane, plane) * stats.std[c] + stats.mean[c];
  }
}

namespace {

Tensor<float> to_tensor(std::vector<float> planar, int side) {
  Tensor<float> t({3, side, side});
  std::copy(planar.begin(), planar.end(), t.data());
  return t;
}

}  // namespace

Tensor<float> train_transform(const Image& image, std::mt19937_64& rng, const PreprocessConfig& cfg,
                              const NormalizationStats& stats) {
  if (image.short_side() < 2) throw ImageError("train_transform: image short side must be >= 2 pixels");
  const CropWindow w = sample_crop(image.width, image.height, rng, cfg);
  Tensor<float> t = to_tensor(crop_resize_planar(image, w.x0, w.y0, w.side, w.side, cfg.train_side), cfg.train_side);
  normalize(t, stats);
  return t;
}

std::pair<int, int> eval_crop_offsets(int width, int height, int side) {
  const double scale = static_cast<double>(side) / std::min(width, height);
  const int w = width <= height ? side : static_cast<int>(std::lround(width * scale));
  const int h = height <= width ? side : static_cast<int>(std::lround(height * scale));
  return {(w - side) / 2, (h - side) / 2};
}

Tensor<float> eval_transform(const Image& image, const PreprocessConfig& cfg, const NormalizationStats& stats) {
  if (image.short_side() < 1) throw ImageError("eval_transform: empty image");
  const int side = cfg.eval_side;
  const double scale = static_cast<double>(side) / image.short_side();
  const auto [ox, oy] = eval_crop_offsets(image.width, image.height, side);
  const int w = image.width <= image.height ? side : static_cast<int>(std::lround(image.width * scale));
  const int h = image.height <= image.width ? side : static_cast<int>(std::lround(image.height * scale));
  Tensor<float> t = to_tensor(resize_crop_planar(image, w, h, ox, oy, side), side);
  normalize(t, stats);
  return t;
}

}  // namespace dfd
