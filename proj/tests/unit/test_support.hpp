#pragma once

#include "dfd/archive.hpp"
#include "dfd/data.hpp"
#include "dfd/image.hpp"
#include "dfd/tensor.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

namespace dfd::test {

inline std::filesystem::path data_dir() { return DFD_TEST_DATA_DIR; }

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dfd_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// max |a - b| / max(max |b|, floor)
template <typename A, typename B>
double max_rel_error(const A& a, const B& b, double floor = 1e-6) {
  REQUIRE(a.size() == b.size());
  double diff = 0.0, scale = floor;
  for (Index i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    scale = std::max(scale, std::abs(static_cast<double>(b[i])));
  }
  return diff / scale;
}

/// Separable toy images: real ones are solid colors, fake ones are uniform
/// noise. Written as PNG under `dir`; the manifest holds absolute paths.
inline DatasetManifest toy_dataset(const std::filesystem::path& dir, int n_train, int n_val, int n_test, int side,
                                   std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> byte(0, 255);
  std::vector<LabeledImage> records;
  auto emit = [&](Split split, int count) {
    for (int i = 0; i < count; ++i) {
      const Label label = i % 2 ? Label::fake : Label::real;
      Image im(side, side);
      if (label == Label::real) {
        const int c[3] = {byte(rng), byte(rng), byte(rng)};
        for (std::size_t k = 0; k < im.pixels.size(); ++k) im.pixels[k] = static_cast<std::uint8_t>(c[k % 3]);
      } else {
        for (auto& px : im.pixels) px = static_cast<std::uint8_t>(byte(rng));
      }
      const std::string id = to_string(split) + "_" + std::to_string(i);
      const auto path = dir / (id + ".png");
      write_png(im, path);
      records.push_back({id, path, label, split});
    }
  };
  emit(Split::train, n_train);
  emit(Split::val, n_val);
  emit(Split::test, n_test);
  return make_manifest(std::move(records));
}

/// Writes `text` to `dir/name` and returns the path.
inline std::filesystem::path write_text(const std::filesystem::path& dir, const std::string& name,
                                        const std::string& text) {
  write_file_atomic(dir / name, text);
  return dir / name;
}

}  // namespace dfd::test
