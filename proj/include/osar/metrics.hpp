#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>

#include "osar/errors.hpp"
#include "osar/image.hpp"

// Region statistics used to score artifact reduction without ground truth:
// mean, population standard deviation, and SNR = mean / std inside a
// homogeneous rectangle, plus relative changes against the input image.

namespace osar {

struct Region {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t width = 0;
  std::size_t height = 0;

  std::size_t area() const { return width * height; }
  friend bool operator==(const Region&, const Region&) = default;
};

inline void validate_region(const Region& r, const Image& image) {
  if (r.x + r.width > image.width || r.y + r.height > image.height)
    throw SizeError("region lies outside the image");
  if (r.area() < 4) throw SizeError("region must cover at least 4 pixels");
}

struct MetricReport {
  Region region;
  double mean = 0.0;
  double std = 0.0;
  double snr = 0.0;
  bool snr_infinite = false;  ///< std == 0; snr holds +inf
  // Relative to a baseline report on the same region; 0 against itself.
  double delta_snr_pct = 0.0;
  double delta_mean_pct = 0.0;
  bool delta_undefined = false;  ///< baseline snr or mean was 0
};

/// Mean, population std, and mean/std over the region's pixels.
inline MetricReport region_snr(const Image& image, const Region& region) {
  validate_region(region, image);
  double sum = 0;
  for (std::size_t y = region.y; y < region.y + region.height; ++y)
    for (std::size_t x = region.x; x < region.x + region.width; ++x) sum += image(x, y);
  const double n = static_cast<double>(region.area());
  const double mean = sum / n;
  double sq = 0;
  for (std::size_t y = region.y; y < region.y + region.height; ++y)
    for (std::size_t x = region.x; x < region.x + region.width; ++x) sq += (image(x, y) - mean) * (image(x, y) - mean);
  MetricReport r;
  r.region = region;
  r.mean = mean;
  r.std = std::sqrt(sq / n);
  if (r.std == 0.0) {
    r.snr = std::numeric_limits<double>::infinity();
    r.snr_infinite = true;
  } else {
    r.snr = mean / r.std;
  }
  return r;
}

struct Improvement {
  double delta_snr_pct = 0.0;
  double delta_mean_pct = 0.0;
  bool undefined = false;
};

/// ΔSNR% = 100 (snr_out - snr_in) / snr_in;  Δmean% = 100 |mean_out - mean_in| / |mean_in|.
inline Improvement improvement(const MetricReport& input, const MetricReport& output) {
  Improvement d;
  if (input.snr == 0.0 || input.mean == 0.0 || input.snr_infinite || output.snr_infinite) {
    d.undefined = true;
    return d;
  }
  d.delta_snr_pct = 100.0 * (output.snr - input.snr) / input.snr;
  d.delta_mean_pct = 100.0 * std::abs(output.mean - input.mean) / std::abs(input.mean);
  return d;
}

/// Report for `output` on `region` with deltas against `baseline` on the same region.
inline MetricReport compare(const Image& baseline, const Image& output, const Region& region) {
  const MetricReport in = region_snr(baseline, region);
  MetricReport out = region_snr(output, region);
  const Improvement d = improvement(in, out);
  out.delta_snr_pct = d.delta_snr_pct;
  out.delta_mean_pct = d.delta_mean_pct;
  out.delta_undefined = d.undefined;
  return out;
}

/// Lowest-variance window x window sub-rectangle of `roi`, scanned at stride 1.
/// Ties keep the first window in (y, x) order.
inline Region find_homogeneous_region(const Image& image, const Region& roi, std::size_t window = 32) {
  if (roi.x + roi.width > image.width || roi.y + roi.height > image.height)
    throw SizeError("region of interest lies outside the image");
  if (roi.width < window || roi.height < window) throw SizeError("region of interest is smaller than the window");
  Region best{roi.x, roi.y, window, window};
  double best_var = std::numeric_limits<double>::infinity();
  const double n = static_cast<double>(window * window);
  for (std::size_t y = roi.y; y + window <= roi.y + roi.height; ++y)
    for (std::size_t x = roi.x; x + window <= roi.x + roi.width; ++x) {
      double sum = 0;
      for (std::size_t j = 0; j < window; ++j)
        for (std::size_t i = 0; i < window; ++i) sum += image(x + i, y + j);
      const double mean = sum / n;
      double var = 0;
      for (std::size_t j = 0; j < window; ++j)
        for (std::size_t i = 0; i < window; ++i) var += (image(x + i, y + j) - mean) * (image(x + i, y + j) - mean);
      var /= n;
      if (var < best_var) {
        best_var = var;
        best = {x, y, window, window};
      }
    }
  return best;
}

inline nlohmann::json region_to_json(const Region& r) {
  return {{"x", r.x}, {"y", r.y}, {"width", r.width}, {"height", r.height}};
}

inline Region region_from_json(const nlohmann::json& j) {
  return {j.at("x").get<std::size_t>(), j.at("y").get<std::size_t>(), j.at("width").get<std::size_t>(),
          j.at("height").get<std::size_t>()};
}

/// Parses "x,y,w,h".
inline Region parse_region(const std::string& text) {
  Region r;
  char c1 = 0, c2 = 0, c3 = 0;
  long v[4] = {-1, -1, -1, -1};
  if (std::sscanf(text.c_str(), "%ld%c%ld%c%ld%c%ld", &v[0], &c1, &v[1], &c2, &v[2], &c3, &v[3]) != 7 || c1 != ',' ||
      c2 != ',' || c3 != ',' || v[0] < 0 || v[1] < 0 || v[2] <= 0 || v[3] <= 0)
    throw FormatError("region must be x,y,w,h with non-negative integers, got '" + text + "'");
  r = {static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[1]), static_cast<std::size_t>(v[2]),
       static_cast<std::size_t>(v[3])};
  return r;
}

/// JSON numbers cannot be infinite; an infinite SNR is written as null with
/// "snr_infinite": true.
inline nlohmann::json metrics_to_json(const MetricReport& m) {
  nlohmann::json j = {{"region", region_to_json(m.region)},
                      {"mean", m.mean},
                      {"std", m.std},
                      {"snr", m.snr_infinite ? nlohmann::json(nullptr) : nlohmann::json(m.snr)},
                      {"delta_snr_pct", m.delta_snr_pct},
                      {"delta_mean_pct", m.delta_mean_pct}};
  if (m.snr_infinite) j["snr_infinite"] = true;
  if (m.delta_undefined) j["delta_undefined"] = true;
  return j;
}

inline MetricReport metrics_from_json(const nlohmann::json& j) {
  MetricReport m;
  m.region = region_from_json(j.at("region"));
  m.mean = j.at("mean").get<double>();
  m.std = j.at("std").get<double>();
  m.snr_infinite = j.value("snr_infinite", false);
  m.snr = m.snr_infinite ? std::numeric_limits<double>::infinity() : j.at("snr").get<double>();
  m.delta_snr_pct = j.at("delta_snr_pct").get<double>();
  m.delta_mean_pct = j.at("delta_mean_pct").get<double>();
  m.delta_undefined = j.value("delta_undefined", false);
  return m;
}

}  // namespace osar
