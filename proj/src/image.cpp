#include "cpcvar/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cpcvar/errors.hpp"

namespace cpcvar {

Image Image::from_tensor(const Tensor& t) {
  if (t.ndim() != 3 || t.dim(2) != 3)
    throw ShapeError("Image::from_tensor: expected [h,w,3], got " + shape_str(t.shape()));
  Image img(t.dim(0), t.dim(1));
  for (size_t i = 0; i < t.value().size(); ++i)
    img.pixels[i] = std::clamp(t.value()[i], 0.0, 1.0);
  return img;
}

Image Image::crop_normalized(double x0, double y0, double x1, double y1) const {
  int64_t px0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(x0 * static_cast<double>(width))), 0, width - 1);
  int64_t py0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(y0 * static_cast<double>(height))), 0, height - 1);
  int64_t px1 = std::clamp<int64_t>(static_cast<int64_t>(std::ceil(x1 * static_cast<double>(width))), px0 + 1, width);
  int64_t py1 = std::clamp<int64_t>(static_cast<int64_t>(std::ceil(y1 * static_cast<double>(height))), py0 + 1, height);
  Image out(py1 - py0, px1 - px0);
  for (int64_t y = py0; y < py1; ++y)
    for (int64_t x = px0; x < px1; ++x)
      for (int64_t ch = 0; ch < 3; ++ch) out.at(y - py0, x - px0, ch) = at(y, x, ch);
  return out;
}

void Image::save_ppm(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StateError("Image::save_ppm: cannot write " + path);
  out << "P6\n" << width << " " << height << "\n255\n";
  for (double v : pixels) {
    double c = std::clamp(v, 0.0, 1.0) * 255.0;
    out.put(static_cast<char>(static_cast<int>(std::lround(c))));
  }
  if (!out) throw StateError("Image::save_ppm: write failed for " + path);
}

Image Image::load_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StateError("Image::load_ppm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw StateError("Image::load_ppm: not a P6 file: " + path);
  int64_t w, h, maxval;
  in >> w >> h >> maxval;
  in.get();
  if (maxval != 255) throw StateError("Image::load_ppm: unsupported max value");
  Image img(h, w);
  for (auto& v : img.pixels) {
    int c = in.get();
    if (c < 0) throw StateError("Image::load_ppm: truncated file");
    v = static_cast<double>(c) / 255.0;
  }
  return img;
}

double image_mse(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width)
    throw ShapeError("image_mse: size mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.pixels.size(); ++i) {
    double d = a.pixels[i] - b.pixels[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.pixels.size());
}

}  // namespace cpcvar
