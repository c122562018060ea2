#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "osar/errors.hpp"
#include "osar/image.hpp"
#include "osar/rng.hpp"

namespace osar {

inline constexpr std::size_t kPatchSize = 32;
inline constexpr std::size_t kPatchPixels = kPatchSize * kPatchSize;

/// A-type: artifacts over a uniform background. N-type: everything else.
enum class PatchLabel { artifact, normal };

inline char label_char(PatchLabel l) { return l == PatchLabel::artifact ? 'A' : 'N'; }

inline PatchLabel parse_label(const std::string& s) {
  if (s == "A") return PatchLabel::artifact;
  if (s == "N") return PatchLabel::normal;
  throw FormatError("ROI label must be \"A\" or \"N\", got \"" + s + "\"");
}

struct Roi {
  std::size_t x = 0;
  std::size_t y = 0;
  PatchLabel label = PatchLabel::normal;

  friend bool operator==(const Roi&, const Roi&) = default;
};

/// 32 x 32 window of a normalized image, row-major.
struct Patch {
  std::array<float, kPatchPixels> values{};
  std::size_t x = 0;
  std::size_t y = 0;

  float& operator()(std::size_t col, std::size_t row) { return values[row * kPatchSize + col]; }
  float operator()(std::size_t col, std::size_t row) const { return values[row * kPatchSize + col]; }
};

struct LabeledPatch {
  Patch patch;
  PatchLabel label;
};

inline void check_roi_fits(const Roi& roi, std::size_t width, std::size_t height) {
  if (roi.x + kPatchSize > width || roi.y + kPatchSize > height)
    throw SizeError("ROI at (" + std::to_string(roi.x) + ", " + std::to_string(roi.y) +
                    ") does not fit a 32x32 window inside " + std::to_string(width) + "x" + std::to_string(height));
}

// ---------------------------------------------------------------------------
// ROI JSON: {"patch_size": 32, "rois": [{"x": 3, "y": 7, "label": "A"}, ...]}

inline nlohmann::json rois_to_json(const std::vector<Roi>& rois) {
  nlohmann::json list = nlohmann::json::array();
  for (const Roi& r : rois) list.push_back({{"x", r.x}, {"y", r.y}, {"label", std::string(1, label_char(r.label))}});
  return {{"patch_size", kPatchSize}, {"rois", list}};
}

inline std::vector<Roi> rois_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("ROI file must be a JSON object");
  if (!j.contains("patch_size") || !j["patch_size"].is_number_integer() || j["patch_size"].get<long>() != 32)
    throw FormatError("ROI file: patch_size must be 32");
  if (!j.contains("rois") || !j["rois"].is_array()) throw FormatError("ROI file: missing \"rois\" array");
  std::vector<Roi> out;
  for (const auto& r : j["rois"]) {
    if (!r.is_object() || !r.contains("x") || !r.contains("y") || !r.contains("label") ||
        !r["x"].is_number_unsigned() || !r["y"].is_number_unsigned() || !r["label"].is_string())
      throw FormatError("ROI file: each ROI needs non-negative integer x, y and a string label");
    out.push_back({r["x"].get<std::size_t>(), r["y"].get<std::size_t>(), parse_label(r["label"].get<std::string>())});
  }
  return out;
}

inline std::vector<Roi> parse_rois(const std::string& text) {
  try {
    return rois_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("ROI file: ") + e.what());
  }
}

inline std::vector<Roi> load_rois(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_rois(ss.str());
}

inline void validate_rois(const std::vector<Roi>& rois, const Image& image) {
  for (const Roi& r : rois) check_roi_fits(r, image.width, image.height);
}

// ---------------------------------------------------------------------------

inline Patch extract_patch(const Image& image, std::size_t x, std::size_t y) {
  check_roi_fits(Roi{x, y, PatchLabel::normal}, image.width, image.height);
  Patch p;
  p.x = x;
  p.y = y;
  for (std::size_t r = 0; r < kPatchSize; ++r)
    for (std::size_t c = 0; c < kPatchSize; ++c) p(c, r) = static_cast<float>(image(x + c, y + r));
  return p;
}

/// Window origins along one axis: stride steps with the last origin clamped to length - 32.
inline std::vector<std::size_t> grid_origins(std::size_t length, std::size_t stride) {
  std::vector<std::size_t> out;
  for (std::size_t o = 0;; o += stride) {
    if (o + kPatchSize >= length) {
      out.push_back(length - kPatchSize);
      break;
    }
    out.push_back(o);
  }
  return out;
}

/// Slices the image into 32 x 32 patches, row by row. Patches on the right and
/// bottom edges are aligned to the image border so every pixel is covered.
inline std::vector<Patch> slice_patches(const Image& image, std::size_t stride) {
  if (stride == 0) throw ContractError("slice_patches: stride must be positive");
  if (image.width < kPatchSize || image.height < kPatchSize)
    throw SizeError("slice_patches: image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                    " is smaller than 32x32");
  std::vector<Patch> out;
  const auto xs = grid_origins(image.width, stride);
  const auto ys = grid_origins(image.height, stride);
  out.reserve(xs.size() * ys.size());
  for (std::size_t y : ys)
    for (std::size_t x : xs) out.push_back(extract_patch(image, x, y));
  return out;
}

// ---------------------------------------------------------------------------
// Geometric augmentation

inline Patch flip_horizontal(const Patch& in) {
  Patch out = in;
  for (std::size_t r = 0; r < kPatchSize; ++r)
    for (std::size_t c = 0; c < kPatchSize; ++c) out(c, r) = in(kPatchSize - 1 - c, r);
  return out;
}

inline Patch flip_vertical(const Patch& in) {
  Patch out = in;
  for (std::size_t r = 0; r < kPatchSize; ++r)
    for (std::size_t c = 0; c < kPatchSize; ++c) out(c, r) = in(c, kPatchSize - 1 - r);
  return out;
}

/// Rotation by 90 degrees clockwise.
inline Patch rotate90(const Patch& in) {
  Patch out = in;
  for (std::size_t r = 0; r < kPatchSize; ++r)
    for (std::size_t c = 0; c < kPatchSize; ++c) out(kPatchSize - 1 - r, c) = in(c, r);
  return out;
}

enum class Augmentation { identity, flip_h, flip_v, rot90, rot180, rot270, translate };
inline constexpr std::size_t kAugmentationCount = 7;
inline constexpr int kMaxShift = 4;

inline Patch apply_augmentation(const Patch& p, Augmentation a) {
  switch (a) {
    case Augmentation::identity: return p;
    case Augmentation::flip_h: return flip_horizontal(p);
    case Augmentation::flip_v: return flip_vertical(p);
    case Augmentation::rot90: return rotate90(p);
    case Augmentation::rot180: return rotate90(rotate90(p));
    case Augmentation::rot270: return rotate90(rotate90(rotate90(p)));
    case Augmentation::translate: break;
  }
  throw ContractError("translation needs the source image");
}

/// Builds a class-balanced training set: `per_class` samples for each label,
/// each an ROI (picked uniformly within its class) under an augmentation drawn
/// uniformly from identity, flips, rotations, and shifts of up to 4 px.
/// Shifted windows that leave the image are redrawn.
inline std::vector<LabeledPatch> augment_rois(const std::vector<Roi>& rois, const Image& image, Rng& rng,
                                              std::size_t per_class) {
  std::array<std::vector<Roi>, 2> by_class;
  for (const Roi& r : rois) {
    check_roi_fits(r, image.width, image.height);
    by_class[r.label == PatchLabel::artifact ? 0 : 1].push_back(r);
  }
  if (by_class[0].empty() || by_class[1].empty())
    throw ContractError("augment_rois: need at least one ROI of each class");

  std::vector<LabeledPatch> out;
  out.reserve(2 * per_class);
  for (const auto& group : by_class) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const Roi& roi = group[rng.index(group.size())];
      const auto kind = static_cast<Augmentation>(rng.index(kAugmentationCount));
      if (kind != Augmentation::translate) {
        out.push_back({apply_augmentation(extract_patch(image, roi.x, roi.y), kind), roi.label});
        continue;
      }
      for (;;) {
        const long nx = static_cast<long>(roi.x) + rng.integer(-kMaxShift, kMaxShift);
        const long ny = static_cast<long>(roi.y) + rng.integer(-kMaxShift, kMaxShift);
        if (nx < 0 || ny < 0 || static_cast<std::size_t>(nx) + kPatchSize > image.width ||
            static_cast<std::size_t>(ny) + kPatchSize > image.height)
          continue;
        out.push_back({extract_patch(image, static_cast<std::size_t>(nx), static_cast<std::size_t>(ny)), roi.label});
        break;
      }
    }
  }
  return out;
}

}  // namespace osar
