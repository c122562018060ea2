#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "osar/image.hpp"
#include "osar/metrics.hpp"
#include "osar/patch.hpp"
#include "osar/rng.hpp"

// Synthetic test scenes with known structure, used by the acceptance suite,
// the examples, and `osar phantom`.

namespace osar {

/// Where the phantom's Gaussian noise is added.
enum class NoiseCoverage { background, everywhere };

/// 256 x 256 phantom: background 0.5, a disk at 0.8 and a rectangle at 0.2,
/// plus additive zero-mean Gaussian noise (by default on the background only,
/// so the shapes stay clean). Comes with the standard annotation (4 A-type
/// ROIs on noisy background, 3 N-type ROIs on shape edges) and a background
/// evaluation region disjoint from every ROI.
struct Phantom {
  Image clean;
  Image noisy;
  std::vector<Roi> rois;
  Region evaluation;
  std::vector<Region> background_regions;  ///< the A-type ROI windows
  std::vector<Region> edge_regions;        ///< the N-type ROI windows
};

struct PhantomGeometry {
  double disk_cx = 80, disk_cy = 90, disk_r = 40;
  std::size_t rect_x0 = 150, rect_y0 = 140, rect_x1 = 230, rect_y1 = 220;
};

inline Phantom make_phantom(std::uint64_t seed, double sigma = 0.05,
                            NoiseCoverage coverage = NoiseCoverage::background, std::size_t size = 256) {
  const PhantomGeometry g;
  Phantom p;
  p.clean = Image(size, size, 0.5);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - g.disk_cx, dy = static_cast<double>(y) + 0.5 - g.disk_cy;
      if (dx * dx + dy * dy <= g.disk_r * g.disk_r) p.clean(x, y) = 0.8;
      if (x >= g.rect_x0 && x < g.rect_x1 && y >= g.rect_y0 && y < g.rect_y1) p.clean(x, y) = 0.2;
    }
  Rng rng(seed);
  p.noisy = p.clean;
  for (std::size_t i = 0; i < p.noisy.size(); ++i) {
    const double n = rng.normal(0.0, sigma);  // drawn for every pixel so coverage does not shift the stream
    if (coverage == NoiseCoverage::everywhere || p.clean.pixels[i] == 0.5) p.noisy.pixels[i] += n;
  }

  p.rois = {{8, 8, PatchLabel::artifact},    {200, 10, PatchLabel::artifact}, {10, 180, PatchLabel::artifact},
            {100, 210, PatchLabel::artifact}, {24, 74, PatchLabel::normal},    {134, 164, PatchLabel::normal},
            {174, 124, PatchLabel::normal}};
  for (const Roi& r : p.rois)
    (r.label == PatchLabel::artifact ? p.background_regions : p.edge_regions)
        .push_back({r.x, r.y, kPatchSize, kPatchSize});
  p.evaluation = {196, 64, 32, 32};
  return p;
}

/// ROI set for the phantom with `count` entries (>= 7): the standard seven
/// followed by extra background and edge windows, alternating A and N.
inline std::vector<Roi> phantom_rois(std::size_t count) {
  std::vector<Roi> rois = make_phantom(0, 0.0).rois;
  const std::vector<Roi> extra_a = {{40, 8, PatchLabel::artifact},   {80, 8, PatchLabel::artifact},
                                    {120, 8, PatchLabel::artifact},  {160, 10, PatchLabel::artifact},
                                    {220, 60, PatchLabel::artifact}, {140, 60, PatchLabel::artifact},
                                    {10, 140, PatchLabel::artifact}, {50, 150, PatchLabel::artifact},
                                    {60, 215, PatchLabel::artifact}, {220, 224, PatchLabel::artifact}};
  const std::vector<Roi> extra_n = {{104, 74, PatchLabel::normal},  {64, 34, PatchLabel::normal},
                                    {64, 114, PatchLabel::normal},  {214, 164, PatchLabel::normal},
                                    {174, 204, PatchLabel::normal}, {134, 204, PatchLabel::normal},
                                    {214, 124, PatchLabel::normal}, {134, 124, PatchLabel::normal},
                                    {36, 106, PatchLabel::normal},  {96, 106, PatchLabel::normal}};
  for (std::size_t i = 0; rois.size() < count && i < extra_a.size() + extra_n.size(); ++i)
    rois.push_back(i % 2 == 0 ? extra_a[i / 2] : extra_n[i / 2]);
  return rois;
}

/// Two-class classifier scene: the left half is uniform 0.5 with Gaussian
/// noise (sigma 0.1); the right half is noise-free black/white stripes whose
/// edges fall in the middle of the ROI windows placed at x = 128, 160, 192.
struct ClassifierScene {
  Image image;
  std::vector<Roi> rois;
};

inline ClassifierScene make_classifier_scene(std::uint64_t seed, std::size_t roi_count) {
  ClassifierScene s;
  s.image = Image(256, 256);
  Rng rng(seed);
  for (std::size_t y = 0; y < 256; ++y)
    for (std::size_t x = 0; x < 256; ++x)
      s.image(x, y) = x < 128 ? 0.5 + rng.normal(0.0, 0.1) : (((x - 128 + 16) / 32) % 2 ? 1.0 : 0.0);
  // Alternate A and N, walking a grid of candidate windows on each half.
  std::vector<Roi> a, n;
  for (std::size_t y = 4; y + kPatchSize <= 256; y += 36)
    for (std::size_t x = 4; x + kPatchSize <= 124; x += 30) a.push_back({x, y, PatchLabel::artifact});
  for (std::size_t y = 8; y + kPatchSize <= 256; y += 34)
    for (std::size_t x : {128u, 160u, 192u}) n.push_back({x, y, PatchLabel::normal});
  for (std::size_t i = 0; s.rois.size() < roi_count; ++i) {
    if (i % 2 == 0 && i / 2 < a.size()) s.rois.push_back(a[i / 2]);
    if (i % 2 == 1 && i / 2 < n.size()) s.rois.push_back(n[i / 2]);
    if (i > a.size() + n.size() + 2) break;
  }
  return s;
}

}  // namespace osar
