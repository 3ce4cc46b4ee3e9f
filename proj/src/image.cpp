#include "dfd/image.hpp"

#include "dfd/archive.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>

namespace dfd {

namespace {

cv::Mat as_mat(const Image& image) {
  return cv::Mat(image.height, image.width, CV_8UC3, const_cast<std::uint8_t*>(image.pixels.data()));
}

std::vector<float> to_planar(const cv::Mat& hwc) {
  const cv::Mat src = hwc.isContinuous() ? hwc : hwc.clone();
  std::vector<float> out(static_cast<std::size_t>(3) * src.rows * src.cols);
  std::vector<cv::Mat> planes;
  for (int c = 0; c < 3; ++c) {
    planes.emplace_back(src.rows, src.cols, CV_32FC1, out.data() + static_cast<std::size_t>(c) * src.rows * src.cols);
  }
  cv::split(src, planes);
  return out;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ImageError("image not found: " + path.string());
  const std::string bytes = read_file(path);
  const cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<char*>(bytes.data()));
  cv::Mat bgr = cv::imdecode(raw, cv::IMREAD_COLOR);
  if (bgr.empty()) throw ImageError("cannot decode image: " + path.string());
  Image out(bgr.cols, bgr.rows);
  cv::Mat rgb = as_mat(out);
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return out;
}

void write_png(const Image& image, const std::filesystem::path& path) {
  cv::Mat bgr;
  cv::cvtColor(as_mat(image), bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", bgr, buf)) throw ImageError("PNG encoding failed for " + path.string());
  write_file_atomic(path, std::string(buf.begin(), buf.end()));
}

Image resize_bilinear(const Image& image, int width, int height) {
  if (width == image.width && height == image.height) return image;
  cv::Mat f;
  as_mat(image).convertTo(f, CV_32FC3);
  cv::Mat r;
  cv::resize(f, r, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  Image out(width, height);
  cv::Mat dst = as_mat(out);
  r.convertTo(dst, CV_8UC3);  // saturating round-to-nearest
  return out;
}

std::vector<float> crop_resize_planar(const Image& image, int x0, int y0, int w, int h, int side) {
  if (x0 < 0 || y0 < 0 || w <= 0 || h <= 0 || x0 + w > image.width || y0 + h > image.height) {
    throw std::out_of_range("crop outside the image bounds");
  }
  cv::Mat f;
  as_mat(image)(cv::Rect(x0, y0, w, h)).convertTo(f, CV_32FC3, 1.0 / 255.0);
  cv::Mat r;
  if (w == side && h == side) {
    r = f;
  } else {
    cv::resize(f, r, cv::Size(side, side), 0, 0, cv::INTER_LINEAR);
  }
  return to_planar(r);
}

std::vector<float> resize_crop_planar(const Image& image, int width, int height, int x0, int y0, int side) {
  if (x0 < 0 || y0 < 0 || x0 + side > width || y0 + side > height) throw std::out_of_range("crop outside the resized image");
  cv::Mat f;
  as_mat(image).convertTo(f, CV_32FC3, 1.0 / 255.0);
  cv::Mat r;
  if (width == image.width && height == image.height) {
    r = f;
  } else {
    cv::resize(f, r, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  }
  return to_planar(r(cv::Rect(x0, y0, side, side)));
}

std::vector<double> resize_plane(const std::vector<double>& src, int width, int height, int new_width, int new_height) {
  if (static_cast<std::size_t>(width) * height != src.size()) throw std::invalid_argument("resize_plane: size mismatch");
  if (width == new_width && height == new_height) return src;
  const cv::Mat in(height, width, CV_64FC1, const_cast<double*>(src.data()));
  std::vector<double> out(static_cast<std::size_t>(new_width) * new_height);
  cv::Mat dst(new_height, new_width, CV_64FC1, out.data());
  cv::resize(in, dst, cv::Size(new_width, new_height), 0, 0, cv::INTER_LINEAR);
  return out;
}

Image planar_to_image(const float* chw, int width, int height) {
  Image out(width, height);
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      const float v = std::clamp(chw[c * plane + i], 0.0f, 1.0f);
      out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return out;
}

}  // namespace dfd
