#pragma once

#include "dfd/image.hpp"
#include "dfd/model.hpp"
#include "dfd/types.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dfd {

/// Row-major 2-D map.
using Map2d = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Target-layer activations A^k and the target logit's gradient w.r.t. them,
/// both [K, h, w].
struct ActivationGrid {
  Tensor<double> maps;
  Tensor<double> gradients;
  std::string layer_id;
};

struct Heatmap {
  Map2d raw;        // ReLU(sum_k alpha_k A^k), h x w, before normalization
  Map2d grid;       // raw / max(raw), or all zeros
  Map2d upsampled;  // raw bilinearly resized to the input, then max-normalized
  std::vector<double> alpha;  // per-channel spatial mean of the gradient
  Label target_class = Label::fake;
  bool all_zero = false;  // no positive evidence (e.g. vanishing gradient)
  std::string layer_id;
  std::vector<double> logits;  // [real, fake]
};

/// Runs the backbone trunk -> neck -> `head` on a single [1, 3, H, W] input
/// and backpropagates the raw logit of `target` (default: predicted class)
/// to the trunk output. The backbone is put in eval mode.
template <typename Scalar>
ActivationGrid activation_grid(nn::Backbone<Scalar>& backbone, nn::Module<Scalar>& head, const Tensor<Scalar>& input,
                               std::optional<Label> target, std::vector<double>* logits_out = nullptr,
                               Label* chosen = nullptr);

/// alpha_k = mean(dy/dA^k); L = ReLU(sum_k alpha_k A^k); upsample to
/// out_height x out_width and max-normalize.
Heatmap heatmap_from_grid(const ActivationGrid& grid, int out_width, int out_height);

/// GradCAM for a [3, S, S] or [1, 3, S, S] preprocessed input. Dropout is inactive.
template <typename Scalar>
Heatmap gradcam(Detector<Scalar>& detector, const Tensor<Scalar>& input, std::optional<Label> target = std::nullopt);

enum class Colormap { jet, blue_jet, gray };
std::string to_string(Colormap c);
Colormap parse_colormap(const std::string& s);

/// Maps v in [0, 1] to RGB in [0, 1]. `blue_jet` is jet reversed, so the
/// most important regions render blue.
std::array<double, 3> colormap_rgb(Colormap c, double v);

/// Per-pixel alpha = blend * heat: out = (1 - alpha) * image + alpha * colormap(heat).
/// Throws std::invalid_argument when sizes differ.
Image overlay(const Image& image, const Map2d& heat, Colormap colormap = Colormap::blue_jet, double blend = 0.5);

/// NumPy .npy (format 1.0, little-endian float64 '<f8', C order).
void write_npy(const Map2d& m, const std::filesystem::path& path);
Map2d read_npy(const std::filesystem::path& path);

}  // namespace dfd
