#include "dfd/explain.hpp"
#include "dfd/nn/layers.hpp"
#include "test_support.hpp"
#include "toy_backbone.hpp"

#include <random>

using namespace dfd;

namespace {

Tensor<double> random_input(std::uint64_t seed, Index side = 8) {
  Tensor<double> x({1, 3, side, side});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  for (Index i = 0; i < x.size(); ++i) x[i] = d(rng);
  return x;
}

std::unique_ptr<nn::Linear<double>> random_head(Index k, std::uint64_t seed) {
  auto head = std::make_unique<nn::Linear<double>>(k, 2);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  for (Index i = 0; i < head->weight().value.size(); ++i) head->weight().value[i] = d(rng);
  head->bias().value[0] = 0.1;
  head->bias().value[1] = -0.2;
  return head;
}

double target_logit(test::ToyBackbone& b, nn::Linear<double>& head, const Tensor<double>& trunk_out, Label target) {
  return head.forward(b.forward_neck(trunk_out))[static_cast<int>(target)];
}

/// Mean structural similarity over 8x8 windows, per channel.
double ssim(const Image& a, const Image& b) {
  const double c1 = std::pow(0.01 * 255, 2), c2 = std::pow(0.03 * 255, 2);
  double total = 0.0;
  int windows = 0;
  for (int c = 0; c < 3; ++c) {
    for (int y0 = 0; y0 + 8 <= a.height; y0 += 4) {
      for (int x0 = 0; x0 + 8 <= a.width; x0 += 4) {
        double ma = 0, mb = 0;
        for (int y = y0; y < y0 + 8; ++y) {
          for (int x = x0; x < x0 + 8; ++x) {
            ma += a.at(y, x, c);
            mb += b.at(y, x, c);
          }
        }
        ma /= 64;
        mb /= 64;
        double va = 0, vb = 0, cov = 0;
        for (int y = y0; y < y0 + 8; ++y) {
          for (int x = x0; x < x0 + 8; ++x) {
            const double da = a.at(y, x, c) - ma, db = b.at(y, x, c) - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
          }
        }
        va /= 63;
        vb /= 63;
        cov /= 63;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++windows;
      }
    }
  }
  return total / windows;
}

}  // namespace

TEST_CASE("target-layer gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    test::ToyBackbone b(4, true, seed);
    auto head = random_head(4, seed + 100);
    const auto x = random_input(seed + 200);
    for (Label target : {Label::real, Label::fake}) {
      const ActivationGrid g = activation_grid<double>(b, *head, x, target);
      REQUIRE(g.maps.shape() == Shape{4, 8, 8});
      REQUIRE(g.gradients.shape() == Shape{4, 8, 8});
      b.set_recording(false);
      const Tensor<double> a = b.forward_trunk(x);
      Tensor<double> fd(a.shape());
      const double h = 1e-5;
      for (Index i = 0; i < a.size(); ++i) {
        Tensor<double> up = a, down = a;
        up[i] += h;
        down[i] -= h;
        fd[i] = (target_logit(b, *head, up, target) - target_logit(b, *head, down, target)) / (2 * h);
      }
      CHECK(test::max_rel_error(g.gradients.array(), fd.array()) <= 1e-4);
      CHECK(test::max_rel_error(g.maps.array(), a.array()) <= 1e-12);
    }
  }
}

TEST_CASE("identity feature map with a positive head weight") {
  test::ToyBackbone b(1, false, 0);
  auto& w = b.conv().weight().value;  // [1, 3, 3, 3]
  w.set_zero();
  w[4] = 1.0;  // channel 0, kernel center
  b.conv().bias().value.set_zero();
  nn::Linear<double> head(1, 2);
  head.weight().value[0] = -0.5;
  head.weight().value[1] = 2.0;
  head.bias().value.set_zero();
  const auto x = random_input(7);
  const Heatmap hm = heatmap_from_grid(activation_grid<double>(b, head, x, Label::fake), 8, 8);
  CHECK(hm.alpha[0] == doctest::Approx(2.0 / 64.0).epsilon(1e-12));
  double peak = 0.0;
  for (Index i = 0; i < 64; ++i) peak = std::max(peak, x[i]);
  for (int y = 0; y < 8; ++y) {
    for (int xx = 0; xx < 8; ++xx) {
      const double v = std::max(0.0, x[y * 8 + xx]);
      CHECK(hm.raw(y, xx) == doctest::Approx(2.0 / 64.0 * v).epsilon(1e-12));
      CHECK(hm.grid(y, xx) == doctest::Approx(v / peak).epsilon(1e-12));
    }
  }
}

TEST_CASE("zeroed target row gives a flagged all-zero heatmap") {
  test::ToyBackbone b(3, true, 1);
  auto head = random_head(3, 2);
  for (Index k = 0; k < 3; ++k) head->weight().value[3 + k] = 0.0;
  const Heatmap hm = heatmap_from_grid(activation_grid<double>(b, *head, random_input(3), Label::fake), 16, 16);
  CHECK(hm.all_zero);
  CHECK(hm.raw.isZero(0.0));
  CHECK(hm.grid.isZero(0.0));
  CHECK(hm.upsampled.isZero(0.0));
}

TEST_CASE("heatmaps are non-negative and bounded") {
  test::ToyBackbone b(5, true, 3);
  auto head = random_head(5, 4);
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Heatmap hm = heatmap_from_grid(activation_grid<double>(b, *head, random_input(1000 + s), std::nullopt), 24, 24);
    CHECK(hm.raw.minCoeff() >= 0.0);
    CHECK(hm.grid.minCoeff() >= 0.0);
    CHECK(hm.upsampled.minCoeff() >= 0.0);
    CHECK(hm.grid.maxCoeff() <= 1.0);
    CHECK(hm.upsampled.maxCoeff() <= 1.0);
    if (!hm.all_zero) CHECK(hm.grid.maxCoeff() == 1.0);
    CHECK(hm.upsampled.rows() == 24);
  }
}

TEST_CASE("scaling features and class weights") {
  const double lambda = 3.0;
  test::ToyBackbone b(4, false, 5);
  auto head = random_head(4, 6);
  const auto x = random_input(8);
  const Heatmap base = heatmap_from_grid(activation_grid<double>(b, *head, x, Label::fake), 8, 8);
  REQUIRE_FALSE(base.all_zero);

  b.conv().weight().value.array() *= lambda;
  b.conv().bias().value.array() *= lambda;
  const Heatmap feat = heatmap_from_grid(activation_grid<double>(b, *head, x, Label::fake), 8, 8);
  CHECK(test::max_rel_error(feat.raw.reshaped(), (lambda * base.raw).reshaped()) <= 1e-12);

  head->weight().value.array() *= lambda;
  const Heatmap both = heatmap_from_grid(activation_grid<double>(b, *head, x, Label::fake), 8, 8);
  CHECK(test::max_rel_error(both.raw.reshaped(), (lambda * lambda * base.raw).reshaped()) <= 1e-12);
  CHECK(test::max_rel_error(both.grid.reshaped(), base.grid.reshaped()) <= 1e-12);
}

TEST_CASE("shifting the other logit changes nothing") {
  test::ToyBackbone b(4, true, 9);
  auto head = random_head(4, 10);
  const auto x = random_input(11);
  const Heatmap a = heatmap_from_grid(activation_grid<double>(b, *head, x, Label::fake), 8, 8);
  head->bias().value[0] += 7.5;
  const Heatmap c = heatmap_from_grid(activation_grid<double>(b, *head, x, Label::fake), 8, 8);
  CHECK(a.raw == c.raw);
  CHECK(a.upsampled == c.upsampled);
}

TEST_CASE("default target is the predicted class") {
  test::ToyBackbone b(4, true, 12);
  auto head = random_head(4, 13);
  const auto x = random_input(14);
  std::vector<double> logits;
  Label chosen = Label::real;
  activation_grid<double>(b, *head, x, std::nullopt, &logits, &chosen);
  CHECK(chosen == (logits[1] > logits[0] ? Label::fake : Label::real));
}

TEST_CASE("detector GradCAM for every architecture") {
  for (Architecture arch : kArchitectures) {
    CAPTURE(to_string(arch));
    DetectorConfig cfg;
    cfg.arch = arch;
    cfg.variant = ModelVariant::tiny;
    cfg.input_side = 32;
    auto det = build_detector(cfg);
    Tensor<float> x({3, 32, 32});
    std::mt19937_64 rng(1);
    std::normal_distribution<float> d(0.0f, 1.0f);
    for (Index i = 0; i < x.size(); ++i) x[i] = d(rng);
    const Heatmap hm = gradcam(*det, x);
    CHECK(hm.upsampled.rows() == 32);
    CHECK(hm.upsampled.cols() == 32);
    CHECK(hm.raw.minCoeff() >= 0.0);
    CHECK_FALSE(hm.layer_id.empty());
    const auto logits = det->logits(x.reshaped({1, 3, 32, 32}), false);
    CHECK(hm.logits[0] == doctest::Approx(logits[0]).epsilon(1e-5));
    CHECK(hm.target_class == (logits[1] > logits[0] ? Label::fake : Label::real));
    const Heatmap again = gradcam(*det, x);
    CHECK(again.raw == hm.raw);
  }
}

TEST_CASE("non-finite maps are rejected") {
  ActivationGrid g;
  g.maps = Tensor<double>({1, 2, 2}, std::nan(""));
  g.gradients = Tensor<double>({1, 2, 2}, 1.0);
  CHECK_THROWS_AS(heatmap_from_grid(g, 4, 4), std::domain_error);
}

TEST_CASE("colormaps") {
  for (double v : {0.0, 0.1, 0.37, 0.5, 0.8, 1.0}) {
    CHECK(colormap_rgb(Colormap::blue_jet, v) == colormap_rgb(Colormap::jet, 1.0 - v));
    for (double c : colormap_rgb(Colormap::jet, v)) {
      CHECK(c >= 0.0);
      CHECK(c <= 1.0);
    }
  }
  const auto hot = colormap_rgb(Colormap::blue_jet, 1.0);
  CHECK(hot[2] > hot[0]);  // most important renders blue
  CHECK(parse_colormap("jet") == Colormap::jet);
  CHECK_THROWS(parse_colormap("viridis"));
}

TEST_CASE("overlay") {
  Image im(16, 12);
  for (std::size_t i = 0; i < im.pixels.size(); ++i) im.pixels[i] = static_cast<std::uint8_t>(i * 7 % 256);
  SUBCASE("zero heat leaves the image unchanged") {
    CHECK(overlay(im, Map2d::Zero(12, 16)).pixels == im.pixels);
  }
  SUBCASE("full heat at blend 1 is the colormap") {
    const Image out = overlay(im, Map2d::Ones(12, 16), Colormap::jet, 1.0);
    const auto rgb = colormap_rgb(Colormap::jet, 1.0);
    for (int y = 0; y < 12; ++y) {
      for (int x = 0; x < 16; ++x) {
        for (int c = 0; c < 3; ++c) CHECK(out.at(y, x, c) == std::lround(255.0 * rgb[c]));
      }
    }
  }
  SUBCASE("size mismatch") { CHECK_THROWS_AS(overlay(im, Map2d::Zero(16, 12)), std::invalid_argument); }
  SUBCASE("checkerboard matches the reference render") {
    Image base(64, 64);
    Map2d heat(64, 64);
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        for (int c = 0; c < 3; ++c) base.at(y, x, c) = static_cast<std::uint8_t>((3 * x + 2 * y + 50 * c) % 256);
        heat(y, x) = ((y / 8) + (x / 8)) % 2 == 0 ? 0.9 : 0.2;
      }
    }
    const Image golden = read_image(test::data_dir() / "overlay_checkerboard.png");
    const Image out = overlay(base, heat, Colormap::blue_jet, 0.5);
    const double s = ssim(out, golden);
    MESSAGE("SSIM vs reference render: " << s);
    CHECK(s >= 0.95);
    CHECK(ssim(base, golden) < s);
  }
}

TEST_CASE("npy round trip and header layout") {
  const auto dir = test::scratch_dir("explain_npy");
  Map2d m(3, 5);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = i * 0.25 - 1.0;
  write_npy(m, dir / "h.npy");
  CHECK(read_npy(dir / "h.npy") == m);
  const std::string bytes = read_file(dir / "h.npy");
  CHECK(bytes.substr(0, 6) == "\x93NUMPY");
  CHECK(bytes[6] == 1);
  const auto header_len = static_cast<std::size_t>(static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8));
  CHECK((10 + header_len) % 64 == 0);
  const std::string header = bytes.substr(10, header_len);
  CHECK(header.find("'descr': '<f8'") != std::string::npos);
  CHECK(header.find("'fortran_order': False") != std::string::npos);
  CHECK(header.find("(3, 5)") != std::string::npos);
  CHECK(bytes.size() == 10 + header_len + 15 * 8);
}
