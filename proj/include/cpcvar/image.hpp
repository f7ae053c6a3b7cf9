#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpcvar/tensor.hpp"

namespace cpcvar {

// RGB raster with doubles in [0,1], row-major.
struct Image {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> pixels;  // height*width*3

  Image() = default;
  Image(int64_t h, int64_t w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<size_t>(h * w * 3), fill) {}

  double& at(int64_t y, int64_t x, int64_t ch) {
    return pixels[static_cast<size_t>((y * width + x) * 3 + ch)];
  }
  double at(int64_t y, int64_t x, int64_t ch) const {
    return pixels[static_cast<size_t>((y * width + x) * 3 + ch)];
  }

  Tensor to_tensor() const { return Tensor::from({height, width, 3}, pixels); }
  static Image from_tensor(const Tensor& t);  // clamps values into [0,1]

  // Pixel rectangle covered by a normalized box; always at least 1x1.
  Image crop_normalized(double x0, double y0, double x1, double y1) const;

  void save_ppm(const std::string& path) const;
  static Image load_ppm(const std::string& path);

  bool operator==(const Image& other) const {
    return height == other.height && width == other.width && pixels == other.pixels;
  }
};

// Mean squared pixel distance between same-size images.
double image_mse(const Image& a, const Image& b);

}  // namespace cpcvar
