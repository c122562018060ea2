#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "osar/errors.hpp"

namespace osar {

/// Single-channel 2-D image stored row-major.
///
/// `value_min` / `value_max` hold the physical range recorded by normalize()
/// so that denormalize() can map [0, 1] values back to the original units.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;
  double value_min = 0.0;
  double value_max = 1.0;
  std::vector<std::string> warnings;

  Image() = default;
  Image(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), pixels(w * h, fill) {}

  double& operator()(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  double operator()(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  std::size_t size() const noexcept { return pixels.size(); }
};

/// Linear map of pixels onto [0, 1]. A constant image maps to all zeros and
/// records a warning; its value is kept in value_min so it can be restored.
inline Image normalize(const Image& image) {
  if (image.pixels.empty()) throw SizeError("normalize: empty image");
  const auto [lo_it, hi_it] = std::minmax_element(image.pixels.begin(), image.pixels.end());
  const double lo = *lo_it, hi = *hi_it;
  Image out = image;
  out.value_min = lo;
  out.value_max = hi;
  if (hi <= lo) {
    std::fill(out.pixels.begin(), out.pixels.end(), 0.0);
    out.warnings.push_back("constant image: normalized to all zeros");
    return out;
  }
  const double span = hi - lo;
  for (double& p : out.pixels) p = (p - lo) / span;
  return out;
}

/// Inverse of normalize() using the stored range.
inline Image denormalize(const Image& image) {
  Image out = image;
  const double span = image.value_max - image.value_min;
  for (double& p : out.pixels) p = image.value_min + p * span;
  return out;
}

}  // namespace osar
