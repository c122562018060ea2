#pragma once

#include <png.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "osar/errors.hpp"
#include "osar/image.hpp"

namespace osar {

enum class ImageFormat {
  png8,    ///< 8-bit grayscale PNG
  pgm16,   ///< binary PGM (P5); loads 8- or 16-bit, saves 16-bit
  raw_f32  ///< little-endian float32 payload with a `<path>.json` sidecar
};

inline std::string format_name(ImageFormat f) {
  switch (f) {
    case ImageFormat::png8: return "png";
    case ImageFormat::pgm16: return "pgm";
    case ImageFormat::raw_f32: return "f32";
  }
  return "?";
}

inline ImageFormat parse_format(std::string name) {
  std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
  if (!name.empty() && name.front() == '.') name.erase(0, 1);
  if (name == "png") return ImageFormat::png8;
  if (name == "pgm") return ImageFormat::pgm16;
  if (name == "f32" || name == "raw") return ImageFormat::raw_f32;
  throw FormatError("unknown image format '" + name + "' (expected png, pgm, or f32)");
}

inline ImageFormat format_from_path(const std::filesystem::path& path) {
  return parse_format(path.extension().string());
}

inline std::filesystem::path raw_sidecar_path(const std::filesystem::path& payload) {
  return std::filesystem::path(payload.string() + ".json");
}

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw IoError("short write to " + path.string());
}

inline std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

// PGM header tokens are whitespace separated; '#' starts a comment to end of line.
inline std::string pgm_token(const std::vector<unsigned char>& bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(bytes[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  std::string token;
  while (pos < bytes.size() && !std::isspace(bytes[pos])) token.push_back(static_cast<char>(bytes[pos++]));
  if (token.empty()) throw FormatError("pgm: truncated header");
  return token;
}

inline std::size_t pgm_number(const std::vector<unsigned char>& bytes, std::size_t& pos, const char* what) {
  const std::string tok = pgm_token(bytes, pos);
  if (!std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isdigit(c); }))
    throw FormatError(std::string("pgm: malformed ") + what + " '" + tok + "'");
  return std::stoul(tok);
}

}  // namespace detail

/// Decodes an 8-bit grayscale PNG held in memory; pixel values stay in 0..255.
inline Image decode_png(const std::vector<unsigned char>& bytes) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw FormatError(std::string("png: ") + img.message);
  img.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError(std::string("png: ") + img.message);
  }
  Image out(img.width, img.height);
  std::copy(buffer.begin(), buffer.end(), out.pixels.begin());
  return out;
}

/// Encodes values (rounded and clamped to 0..255) as an 8-bit grayscale PNG.
inline std::vector<unsigned char> encode_png(std::size_t width, std::size_t height, const std::vector<double>& values) {
  std::vector<png_byte> buffer(values.size());
  std::transform(values.begin(), values.end(), buffer.begin(), detail::to_u8);
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, buffer.data(), 0, nullptr))
    throw FormatError(std::string("png encode: ") + img.message);
  std::vector<unsigned char> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, buffer.data(), 0, nullptr))
    throw FormatError(std::string("png encode: ") + img.message);
  out.resize(size);
  return out;
}

/// Parses a binary PGM (P5) with maxval up to 65535; samples keep their integer values.
inline Image decode_pgm(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError("pgm: missing P5 magic");
  std::size_t pos = 2;
  const std::size_t width = detail::pgm_number(bytes, pos, "width");
  const std::size_t height = detail::pgm_number(bytes, pos, "height");
  const std::size_t maxval = detail::pgm_number(bytes, pos, "maxval");
  if (width == 0 || height == 0) throw FormatError("pgm: zero dimension");
  if (maxval == 0 || maxval > 65535) throw FormatError("pgm: maxval out of range");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("pgm: truncated header");
  ++pos;
  const std::size_t sample_bytes = maxval > 255 ? 2 : 1;
  if (bytes.size() - pos < width * height * sample_bytes) throw FormatError("pgm: truncated pixel data");
  Image out(width, height);
  for (std::size_t i = 0; i < width * height; ++i) {
    const std::size_t at = pos + i * sample_bytes;
    out.pixels[i] = sample_bytes == 2 ? static_cast<double>((bytes[at] << 8) | bytes[at + 1]) : bytes[at];
  }
  return out;
}

/// 16-bit PGM, values rounded and clamped to 0..65535 (big-endian samples).
inline std::vector<unsigned char> encode_pgm16(const Image& image) {
  std::ostringstream header;
  header << "P5\n" << image.width << ' ' << image.height << "\n65535\n";
  const std::string h = header.str();
  std::vector<unsigned char> out(h.begin(), h.end());
  out.reserve(h.size() + image.pixels.size() * 2);
  for (double v : image.pixels) {
    const auto s = static_cast<std::uint16_t>(std::clamp(std::lround(v), 0L, 65535L));
    out.push_back(static_cast<unsigned char>(s >> 8));
    out.push_back(static_cast<unsigned char>(s & 0xff));
  }
  return out;
}

/// Parses a little-endian float32 payload whose dimensions come from `sidecar`.
inline Image decode_raw(const std::vector<unsigned char>& payload, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw FormatError("raw: zero dimension");
  if (payload.size() != width * height * 4)
    throw FormatError("raw: payload has " + std::to_string(payload.size()) + " bytes, sidecar implies " +
                      std::to_string(width * height * 4));
  Image out(width, height);
  for (std::size_t i = 0; i < width * height; ++i) {
    std::uint32_t bits = 0;
    for (int b = 3; b >= 0; --b) bits = (bits << 8) | payload[i * 4 + static_cast<std::size_t>(b)];
    out.pixels[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return out;
}

inline std::vector<unsigned char> encode_raw(const Image& image) {
  std::vector<unsigned char> out(image.pixels.size() * 4);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(image.pixels[i]));
    for (std::size_t b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return out;
}

inline nlohmann::json raw_sidecar(std::size_t width, std::size_t height) {
  return {{"width", width}, {"height", height}, {"dtype", "f32"}};
}

inline std::pair<std::size_t, std::size_t> parse_raw_sidecar(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("raw sidecar: ") + e.what());
  }
  if (!j.is_object() || !j.contains("width") || !j.contains("height") || !j["width"].is_number_unsigned() ||
      !j["height"].is_number_unsigned())
    throw FormatError("raw sidecar: width and height must be non-negative integers");
  if (j.contains("dtype") && j["dtype"] != "f32") throw FormatError("raw sidecar: only dtype f32 is supported");
  return {j["width"].get<std::size_t>(), j["height"].get<std::size_t>()};
}

inline Image load_image(const std::filesystem::path& path, ImageFormat format) {
  switch (format) {
    case ImageFormat::png8: return decode_png(detail::read_file(path));
    case ImageFormat::pgm16: return decode_pgm(detail::read_file(path));
    case ImageFormat::raw_f32: {
      const auto side = detail::read_file(raw_sidecar_path(path));
      const auto [w, h] = parse_raw_sidecar(std::string(side.begin(), side.end()));
      return decode_raw(detail::read_file(path), w, h);
    }
  }
  throw FormatError("unsupported format");
}

inline Image load_image(const std::filesystem::path& path) { return load_image(path, format_from_path(path)); }

/// Writes pixels as-is (physical units); PNG/PGM quantize by rounding and clamping.
inline void save_image(const Image& image, const std::filesystem::path& path, ImageFormat format) {
  switch (format) {
    case ImageFormat::png8: {
      const auto bytes = encode_png(image.width, image.height, image.pixels);
      detail::write_file(path, bytes.data(), bytes.size());
      return;
    }
    case ImageFormat::pgm16: {
      const auto bytes = encode_pgm16(image);
      detail::write_file(path, bytes.data(), bytes.size());
      return;
    }
    case ImageFormat::raw_f32: {
      const auto bytes = encode_raw(image);
      detail::write_file(path, bytes.data(), bytes.size());
      const std::string side = raw_sidecar(image.width, image.height).dump();
      detail::write_file(raw_sidecar_path(path), side.data(), side.size());
      return;
    }
  }
}

inline void save_image(const Image& image, const std::filesystem::path& path) {
  save_image(image, path, format_from_path(path));
}

/// Maps [0, 1] values to an 8-bit preview PNG (0 -> black, 1 -> white).
inline std::vector<unsigned char> encode_unit_png(std::size_t width, std::size_t height, const std::vector<double>& unit) {
  std::vector<double> scaled(unit.size());
  std::transform(unit.begin(), unit.end(), scaled.begin(), [](double v) { return 255.0 * std::clamp(v, 0.0, 1.0); });
  return encode_png(width, height, scaled);
}

}  // namespace osar
