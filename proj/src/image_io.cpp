#include "bcosdiff/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

namespace bcosdiff {

std::string encode_ppm(const Tensor<double>& img, int scale) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("ppm: expected [3,H,W], got " + to_string(img.shape()));
  if (scale < 1) throw ConfigError("ppm: scale must be >= 1");
  const Index h = img.dim(1), w = img.dim(2), plane = h * w;
  std::string out = "P6\n" + std::to_string(w * scale) + " " + std::to_string(h * scale) + "\n255\n";
  for (Index y = 0; y < h * scale; ++y) {
    for (Index x = 0; x < w * scale; ++x) {
      const Index i = (y / scale) * w + x / scale;
      for (Index c = 0; c < 3; ++c) {
        const double v = std::clamp(img[c * plane + i], 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
  return out;
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!os) throw std::runtime_error("failed writing " + path);
}

void write_ppm(const std::string& path, const Tensor<double>& img, int scale) { write_text(path, encode_ppm(img, scale)); }

Tensor<double> read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path);
  std::string magic;
  Index w = 0, h = 0;
  int maxval = 0;
  is >> magic >> w >> h >> maxval;
  is.get();
  if (magic != "P6" || w < 1 || h < 1 || maxval != 255) throw DataError(path + ": not a P6/255 PPM");
  Tensor<double> img({3, h, w});
  for (Index i = 0; i < h * w; ++i) {
    for (Index c = 0; c < 3; ++c) {
      const int v = is.get();
      if (v == EOF) throw DataError(path + ": truncated");
      img[c * h * w + i] = v / 255.0;
    }
  }
  return img;
}

Tensor<double> diverging_colormap(const Tensor<double>& map, double range) {
  if (map.rank() != 2) throw ShapeError("colormap: expected [H,W]");
  const Index plane = map.size();
  if (range <= 0) range = map.array().abs().maxCoeff();
  Tensor<double> img({3, map.dim(0), map.dim(1)});
  for (Index i = 0; i < plane; ++i) {
    const double v = range > 0 ? std::clamp(map[i] / range, -1.0, 1.0) : 0.0;
    const double fade = 1.0 - std::abs(v);
    img[i] = v >= 0 ? 1.0 : fade;
    img[plane + i] = fade;
    img[2 * plane + i] = v <= 0 ? 1.0 : fade;
  }
  return img;
}

std::string slugify(const std::string& text) {
  std::string out;
  bool gap = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      if (gap && !out.empty()) out.push_back('-');
      out.push_back(static_cast<char>(std::tolower(c)));
      gap = false;
    } else {
      gap = true;
    }
  }
  return out.empty() ? "prompt" : out;
}

}  // namespace bcosdiff
