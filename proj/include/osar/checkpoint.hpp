#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "osar/errors.hpp"
#include "osar/layers.hpp"
#include "osar/tensor.hpp"

// Checkpoint layout (all integers little-endian):
//   8 bytes   magic "OSARCKPT"
//   u32       format version
//   u64       architecture hash (FNV-1a over parameter names and shapes)
//   u32       parameter count
//   per parameter:
//     u32 name length, name bytes, u32 rank, rank x u64 dims, f32 payload

namespace osar {

inline constexpr char kCheckpointMagic[8] = {'O', 'S', 'A', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <std::floating_point T>
std::uint64_t architecture_hash(const std::vector<NamedParameter<T>>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, tensor] : params) feed(name + shape_string(tensor->shape()) + ";");
  return h;
}

namespace detail {

inline void put_le(std::ostream& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(std::istream& in, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("checkpoint: truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace detail

template <std::floating_point T>
void save_checkpoint(const std::vector<NamedParameter<T>>& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le(out, kCheckpointVersion, 4);
  detail::put_le(out, architecture_hash(params), 8);
  detail::put_le(out, params.size(), 4);
  for (const auto& [name, tensor] : params) {
    detail::put_le(out, name.size(), 4);
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le(out, tensor->rank(), 4);
    for (std::size_t d : tensor->shape()) detail::put_le(out, d, 8);
    for (T v : tensor->data()) detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
  }
  if (!out) throw IoError("short write to " + path.string());
}

/// Loads into an already-constructed model; the stored architecture hash and
/// every parameter name and shape must match.
template <std::floating_point T>
void load_checkpoint(const std::vector<NamedParameter<T>>& params, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw FormatError("checkpoint: bad magic");
  if (detail::get_le(in, 4) != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  if (detail::get_le(in, 8) != architecture_hash(params)) throw FormatError("checkpoint: architecture mismatch");
  if (detail::get_le(in, 4) != params.size()) throw FormatError("checkpoint: parameter count mismatch");
  for (const auto& [name, tensor] : params) {
    const auto len = detail::get_le(in, 4);
    std::string stored(len, '\0');
    if (!in.read(stored.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint: truncated");
    if (stored != name) throw FormatError("checkpoint: expected parameter " + name + ", found " + stored);
    Shape shape(detail::get_le(in, 4));
    for (auto& d : shape) d = detail::get_le(in, 8);
    if (shape != tensor->shape()) throw FormatError("checkpoint: shape mismatch for " + name);
    for (T& v : tensor->data()) v = static_cast<T>(std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(in, 4))));
  }
}

}  // namespace osar
