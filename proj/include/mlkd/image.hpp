// SPDX-License-Identifier: Apache-2.0
//
// Planar RGB frames in [0,1] plus 8-bit PNG persistence. Frames quantize to
// 8 bits on save; the loaded values are the canonical pipeline inputs so a
// save/load round trip is idempotent.

#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlkd/tensor.hpp"

namespace mlkd {

struct ImageF {
  int h = 0, w = 0;
  std::vector<double> v;  // 3 planes, row-major, values in [0,1]

  ImageF() = default;
  ImageF(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(3) * h_ * w_, 0.0) {}

  double& at(int c, int y, int x) { return v[(static_cast<size_t>(c) * h + y) * w + x]; }
  double at(int c, int y, int x) const { return v[(static_cast<size_t>(c) * h + y) * w + x]; }
};

inline Tensor image_tensor(const ImageF& img, bool requires_grad = false) {
  return Tensor::from_data({3, img.h, img.w}, img.v, requires_grad);
}

inline uint8_t quantize8(double x) {
  double s = std::lround(std::clamp(x, 0.0, 1.0) * 255.0);
  return static_cast<uint8_t>(s);
}

inline std::vector<uint8_t> to_rgb8(const ImageF& img) {
  std::vector<uint8_t> out(static_cast<size_t>(img.h) * img.w * 3);
  size_t i = 0;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) out[i++] = quantize8(img.at(c, y, x));
  return out;
}

inline ImageF from_rgb8(const uint8_t* rgb, int h, int w) {
  ImageF img(h, w);
  size_t i = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[i++] / 255.0;
  return img;
}

inline void write_png(const std::string& path, const ImageF& img) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.format = PNG_FORMAT_RGB;
  pi.width = static_cast<png_uint_32>(img.w);
  pi.height = static_cast<png_uint_32>(img.h);
  auto rgb = to_rgb8(img);
  if (!png_image_write_to_file(&pi, path.c_str(), 0, rgb.data(), 0, nullptr))
    throw std::runtime_error("write_png: " + path + ": " + pi.message);
}

inline ImageF read_png(const std::string& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw std::runtime_error("read_png: " + path + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  std::vector<uint8_t> rgb(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, rgb.data(), 0, nullptr))
    throw std::runtime_error("read_png: " + path + ": " + pi.message);
  return from_rgb8(rgb.data(), static_cast<int>(pi.height), static_cast<int>(pi.width));
}

// Fixed-size square crop centered at (cx, cy); out-of-frame area reads 0.
inline ImageF crop_window(const ImageF& img, double cx, double cy, int size) {
  ImageF out(size, size);
  const int x0 = static_cast<int>(std::lround(cx)) - size / 2;
  const int y0 = static_cast<int>(std::lround(cy)) - size / 2;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y) {
      const int sy = y0 + y;
      if (sy < 0 || sy >= img.h) continue;
      for (int x = 0; x < size; ++x) {
        const int sx = x0 + x;
        if (sx >= 0 && sx < img.w) out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  return out;
}

}  // namespace mlkd
