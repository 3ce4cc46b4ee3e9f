#include "dfd/explain.hpp"

#include "dfd/archive.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <regex>

namespace dfd {
namespace fs = std::filesystem;

template <typename Scalar>
ActivationGrid activation_grid(nn::Backbone<Scalar>& backbone, nn::Module<Scalar>& head, const Tensor<Scalar>& input,
                               std::optional<Label> target, std::vector<double>* logits_out, Label* chosen) {
  if (backbone.target_layer().empty()) {
    throw std::invalid_argument("no GradCAM target layer registered for backbone '" + std::string(backbone.kind()) + "'");
  }
  expect_rank(input.shape(), 4, "gradcam");
  if (input.dim(0) != 1) throw ShapeError("gradcam expects a single image, got " + to_string(input.shape()));

  backbone.set_training(false);
  head.set_training(false);
  backbone.set_recording(true);
  head.set_recording(true);
  const Tensor<Scalar> activation = backbone.forward_trunk(input);
  const Tensor<Scalar> logits = head.forward(backbone.forward_neck(activation));
  if (logits.size() != 2) throw ShapeError("gradcam expects two logits, got " + to_string(logits.shape()));

  const Label c = target.value_or(logits[kFakeClass] >= logits[kRealClass] ? Label::fake : Label::real);
  Tensor<Scalar> seed(logits.shape());
  seed[static_cast<Index>(c)] = Scalar(1);
  const Tensor<Scalar> grad = backbone.backward_neck(head.backward(seed));
  backbone.set_recording(false);
  head.set_recording(false);

  if (logits_out) *logits_out = {static_cast<double>(logits[0]), static_cast<double>(logits[1])};
  if (chosen) *chosen = c;
  ActivationGrid out;
  out.maps = backbone.to_grid(activation).template cast<double>();
  out.gradients = backbone.to_grid(grad).template cast<double>();
  out.maps.reshape({out.maps.dim(-3), out.maps.dim(-2), out.maps.dim(-1)});
  out.gradients.reshape(out.maps.shape());
  out.layer_id = backbone.target_layer();
  return out;
}

Heatmap heatmap_from_grid(const ActivationGrid& grid, int out_width, int out_height) {
  const Shape& s = grid.maps.shape();
  if (s.size() != 3 || grid.gradients.shape() != s) throw ShapeError("activation grid must be [K, h, w] with matching gradients");
  if (!grid.maps.array().allFinite() || !grid.gradients.array().allFinite()) {
    throw std::domain_error("non-finite activations or gradients at " + grid.layer_id);
  }
  const Index k = s[0], h = s[1], w = s[2];
  const auto A = grid.maps.block(0, k, h * w);
  const auto G = grid.gradients.block(0, k, h * w);

  Heatmap out;
  out.layer_id = grid.layer_id;
  const Eigen::VectorXd alpha = G.rowwise().mean();
  out.alpha.assign(alpha.data(), alpha.data() + k);
  const Eigen::RowVectorXd combined = (alpha.transpose() * A).cwiseMax(0.0);
  out.raw = Eigen::Map<const Map2d>(combined.data(), h, w);

  const double peak = out.raw.maxCoeff();
  out.all_zero = !(peak > 0.0);
  if (out.all_zero) {
    out.raw.setZero();
    out.grid = Map2d::Zero(h, w);
    out.upsampled = Map2d::Zero(out_height, out_width);
    return out;
  }
  out.grid = out.raw / peak;
  const std::vector<double> flat(out.raw.data(), out.raw.data() + out.raw.size());
  const std::vector<double> up = resize_plane(flat, static_cast<int>(w), static_cast<int>(h), out_width, out_height);
  out.upsampled = Eigen::Map<const Map2d>(up.data(), out_height, out_width).cwiseMax(0.0);
  const double up_peak = out.upsampled.maxCoeff();
  if (up_peak > 0.0) out.upsampled /= up_peak;
  return out;
}

template <typename Scalar>
Heatmap gradcam(Detector<Scalar>& detector, const Tensor<Scalar>& input, std::optional<Label> target) {
  const Tensor<Scalar> batch = input.rank() == 3 ? input.reshaped({1, input.dim(0), input.dim(1), input.dim(2)}) : input;
  const Index side = detector.config().input_side;
  if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != side || batch.dim(3) != side) {
    throw ShapeError("gradcam expects a [3, " + std::to_string(side) + ", " + std::to_string(side) + "] input, got " +
                     to_string(input.shape()));
  }
  detector.set_mode(false);
  std::vector<double> logits;
  Label chosen = Label::fake;
  const ActivationGrid grid = activation_grid(detector.backbone(), detector.head(), batch, target, &logits, &chosen);
  Heatmap h = heatmap_from_grid(grid, static_cast<int>(side), static_cast<int>(side));
  h.target_class = chosen;
  h.logits = logits;
  return h;
}

std::string to_string(Colormap c) {
  switch (c) {
    case Colormap::jet: return "jet";
    case Colormap::blue_jet: return "blue_jet";
    case Colormap::gray: return "gray";
  }
  return "?";
}

Colormap parse_colormap(const std::string& s) {
  if (s == "jet") return Colormap::jet;
  if (s == "blue_jet") return Colormap::blue_jet;
  if (s == "gray") return Colormap::gray;
  throw ValidationError("unknown colormap '" + s + "' (expected jet, blue_jet or gray)");
}

std::array<double, 3> colormap_rgb(Colormap c, double v) {
  v = std::clamp(v, 0.0, 1.0);
  if (c == Colormap::gray) return {v, v, v};
  if (c == Colormap::blue_jet) v = 1.0 - v;
  // Piecewise-linear jet: dark blue -> blue -> cyan -> yellow -> red -> dark red.
  const auto ramp = [v](double center) { return std::clamp(1.5 - 4.0 * std::abs(v - center), 0.0, 1.0); };
  return {ramp(0.75), ramp(0.5), ramp(0.25)};
}

Image overlay(const Image& image, const Map2d& heat, Colormap colormap, double blend) {
  if (heat.rows() != image.height || heat.cols() != image.width) {
    throw std::invalid_argument("overlay: heatmap is " + std::to_string(heat.cols()) + "x" + std::to_string(heat.rows()) +
                                " but the image is " + std::to_string(image.width) + "x" + std::to_string(image.height));
  }
  if (!(blend >= 0.0 && blend <= 1.0)) throw std::invalid_argument("overlay: blend must be in [0, 1]");
  Image out = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const double hv = std::clamp(heat(y, x), 0.0, 1.0);
      const double a = blend * hv;
      if (a == 0.0) continue;
      const auto rgb = colormap_rgb(colormap, hv);
      for (int ch = 0; ch < 3; ++ch) {
        const double v = (1.0 - a) * image.at(y, x, ch) + a * 255.0 * rgb[static_cast<std::size_t>(ch)];
        out.at(y, x, ch) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

void write_npy(const Map2d& m, const fs::path& path) {
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (" + std::to_string(m.rows()) + ", " +
                       std::to_string(m.cols()) + "), }";
  // Magic, version and length take 10 bytes; pad so the data starts 64-aligned.
  header.append((64 - (10 + header.size() + 1) % 64) % 64, ' ');
  header += '\n';
  std::string blob = "\x93NUMPY";
  blob += '\x01';
  blob += '\x00';
  const std::uint16_t len = static_cast<std::uint16_t>(header.size());
  blob.append(reinterpret_cast<const char*>(&len), 2);
  blob += header;
  blob.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  write_file_atomic(path, blob);
}

Map2d read_npy(const fs::path& path) {
  const std::string blob = read_file(path);
  if (blob.size() < 10 || blob.compare(0, 6, "\x93NUMPY") != 0) throw ArchiveError(path.string() + ": not a .npy file");
  std::uint16_t len = 0;
  std::memcpy(&len, blob.data() + 8, 2);
  const std::string header = blob.substr(10, len);
  if (header.find("'<f8'") == std::string::npos || header.find("'fortran_order': False") == std::string::npos) {
    throw ArchiveError(path.string() + ": only C-order little-endian float64 arrays are supported");
  }
  std::smatch match;
  if (!std::regex_search(header, match, std::regex(R"('shape': \((\d+), (\d+)\))"))) {
    throw ArchiveError(path.string() + ": expected a 2-D shape");
  }
  const Index rows = std::stol(match[1]), cols = std::stol(match[2]);
  const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
  if (10 + len + bytes > blob.size()) throw ArchiveError(path.string() + ": truncated");
  Map2d m(rows, cols);
  std::memcpy(m.data(), blob.data() + 10 + len, bytes);
  return m;
}

#define DFD_INSTANTIATE_EXPLAIN(S)                                                                                 \
  template ActivationGrid activation_grid<S>(nn::Backbone<S>&, nn::Module<S>&, const Tensor<S>&, std::optional<Label>, \
                                             std::vector<double>*, Label*);                                       \
  template Heatmap gradcam<S>(Detector<S>&, const Tensor<S>&, std::optional<Label>);

DFD_INSTANTIATE_EXPLAIN(float)
DFD_INSTANTIATE_EXPLAIN(double)

}  // namespace dfd
