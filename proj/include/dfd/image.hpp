#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace dfd {

/// 8-bit RGB, row-major, interleaved (HWC).
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::uint8_t& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  int short_side() const { return width < height ? width : height; }
};

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decodes any format OpenCV reads; grayscale and alpha are converted to RGB.
Image read_image(const std::filesystem::path& path);
/// Encodes PNG through a temp file + rename.
void write_png(const Image& image, const std::filesystem::path& path);

/// Bilinear resize, half-pixel centers, no antialiasing.
Image resize_bilinear(const Image& image, int width, int height);

/// Crop (x0, y0, w, h) of `image` resized to side x side, as planar float
/// RGB in [0, 1] (CHW). Bilinear, half-pixel centers, no antialiasing.
std::vector<float> crop_resize_planar(const Image& image, int x0, int y0, int w, int h, int side);

/// Resizes the whole image to width x height, then takes the side x side
/// window at (x0, y0). Planar float RGB in [0, 1].
std::vector<float> resize_crop_planar(const Image& image, int width, int height, int x0, int y0, int side);

/// Bilinear resize of a single row-major double plane (half-pixel centers).
std::vector<double> resize_plane(const std::vector<double>& src, int width, int height, int new_width, int new_height);

/// Planar float RGB in [0, 1] (CHW, 3 x height x width) to 8-bit, rounding and clamping.
Image planar_to_image(const float* chw, int width, int height);

}  // namespace dfd
