#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <vector>

#include "osar/errors.hpp"
#include "osar/layers.hpp"
#include "osar/optim.hpp"
#include "osar/patch.hpp"
#include "osar/rng.hpp"
#include "osar/tape.hpp"

// Internal data synthesis: a small A/N patch classifier trained from a few
// annotated ROIs, artifact-pattern harvesting from A-type patches, and the
// generator of paired dirty/clean training patches.

namespace osar {

inline constexpr int kArtifactClass = 0;
inline constexpr int kNormalClass = 1;

/// Three conv layers (16/32/64 channels, 3x3, stride 2 on the last two)
/// followed by two fully connected layers (128 hidden units, 2 logits).
template <std::floating_point T>
struct IdsnModel {
  ConvLayer<T> conv1, conv2, conv3;
  DenseLayer<T> fc1, fc2;

  static IdsnModel make(Rng& rng) {
    return {ConvLayer<T>::make(1, 16, 3, 1, rng), ConvLayer<T>::make(16, 32, 3, 2, rng),
            ConvLayer<T>::make(32, 64, 3, 2, rng), DenseLayer<T>::make(64 * 8 * 8, 128, rng),
            DenseLayer<T>::make(128, 2, rng)};
  }

  /// B x 1 x 32 x 32 patches -> B x 2 logits (index 0 = A, 1 = N).
  Var forward(Tape<T>& tape, Var x) {
    Var h = relu(tape, conv1(tape, x));
    h = relu(tape, conv2(tape, h));
    h = relu(tape, conv3(tape, h));
    h = relu(tape, fc1(tape, flatten(tape, h)));
    return fc2(tape, h);
  }

  std::vector<NamedParameter<T>> parameters() {
    std::vector<NamedParameter<T>> out;
    append_parameters(out, "conv1", conv1);
    append_parameters(out, "conv2", conv2);
    append_parameters(out, "conv3", conv3);
    append_parameters(out, "fc1", fc1);
    append_parameters(out, "fc2", fc2);
    return out;
  }
};

struct IdsnTrainOptions {
  std::size_t max_epochs = 30;
  std::size_t patience = 5;  ///< stop after this many epochs without held-out improvement
  std::size_t batch_size = 32;
  double learning_rate = 0.0005;
  double holdout_fraction = 0.2;
};

struct IdsnReport {
  double heldout_accuracy = 0.0;
  std::size_t epochs_run = 0;
  std::vector<double> epoch_losses;
  std::vector<double> epoch_accuracies;
};

template <std::floating_point T>
struct IdsnTraining {
  IdsnModel<T> model;
  IdsnReport report;
};

namespace detail {

inline int class_index(PatchLabel l) { return l == PatchLabel::artifact ? kArtifactClass : kNormalClass; }

template <std::floating_point T>
Tensor<T> stack(std::span<const Patch* const> patches) {
  return stack_patches<T>(patches, [](const Patch* p) -> const auto& { return p->values; });
}

}  // namespace detail

/// Raw logits for a batch of patches, evaluated in chunks.
template <std::floating_point T>
std::vector<std::array<T, 2>> idsn_logits(IdsnModel<T>& model, std::span<const Patch* const> patches) {
  constexpr std::size_t chunk = 128;
  std::vector<std::array<T, 2>> out;
  out.reserve(patches.size());
  for (std::size_t start = 0; start < patches.size(); start += chunk) {
    const auto part = patches.subspan(start, std::min(chunk, patches.size() - start));
    Tape<T> tape(Tape<T>::Mode::inference);
    const auto& z = tape.value(model.forward(tape, tape.constant(detail::stack<T>(part))));
    for (std::size_t i = 0; i < part.size(); ++i) out.push_back({z[2 * i], z[2 * i + 1]});
  }
  return out;
}

/// argmax of the two logits; exact ties go to N so ambiguous patches are not harvested.
template <std::floating_point T>
PatchLabel label_from_logits(const std::array<T, 2>& z) {
  return z[kArtifactClass] > z[kNormalClass] ? PatchLabel::artifact : PatchLabel::normal;
}

template <std::floating_point T>
std::vector<PatchLabel> classify_patches(IdsnModel<T>& model, const std::vector<Patch>& patches) {
  std::vector<const Patch*> ptrs;
  ptrs.reserve(patches.size());
  for (const Patch& p : patches) ptrs.push_back(&p);
  std::vector<PatchLabel> out;
  out.reserve(patches.size());
  for (const auto& z : idsn_logits(model, std::span<const Patch* const>(ptrs))) out.push_back(label_from_logits(z));
  return out;
}

/// Trains the classifier with softmax cross-entropy and Adam. A shuffled 20%
/// split is held out; training stops early once held-out accuracy has not
/// improved for `patience` epochs and the best weights are kept.
template <std::floating_point T>
IdsnTraining<T> train_idsn(const std::vector<LabeledPatch>& samples, Rng& rng, const IdsnTrainOptions& opt = {}) {
  const bool has_a = std::any_of(samples.begin(), samples.end(), [](const auto& s) { return s.label == PatchLabel::artifact; });
  const bool has_n = std::any_of(samples.begin(), samples.end(), [](const auto& s) { return s.label == PatchLabel::normal; });
  if (!has_a || !has_n) throw ContractError("train_idsn: both A and N samples are required");

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  const auto holdout = std::max<std::size_t>(1, static_cast<std::size_t>(opt.holdout_fraction * samples.size()));
  const std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(holdout));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(holdout), order.end());
  if (train.empty()) throw ContractError("train_idsn: not enough samples for a held-out split");

  IdsnTraining<T> result{IdsnModel<T>::make(rng), {}};
  IdsnModel<T>& model = result.model;
  auto named = model.parameters();
  const auto params = parameter_pointers(named);
  AdamState<T> adam;
  adam.learning_rate = opt.learning_rate;

  auto accuracy = [&](IdsnModel<T>& m) {
    std::vector<const Patch*> ptrs;
    for (std::size_t i : test) ptrs.push_back(&samples[i].patch);
    const auto logits = idsn_logits(m, std::span<const Patch* const>(ptrs));
    std::size_t correct = 0;
    for (std::size_t k = 0; k < test.size(); ++k) correct += label_from_logits(logits[k]) == samples[test[k]].label;
    return static_cast<double>(correct) / static_cast<double>(test.size());
  };

  IdsnModel<T> best = model;
  double best_acc = -1.0;
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < opt.max_epochs; ++epoch) {
    rng.shuffle(train.begin(), train.end());
    double loss_sum = 0;
    for (std::size_t start = 0; start < train.size(); start += opt.batch_size) {
      const std::size_t n = std::min(opt.batch_size, train.size() - start);
      std::vector<const Patch*> ptrs;
      std::vector<int> labels;
      for (std::size_t k = 0; k < n; ++k) {
        ptrs.push_back(&samples[train[start + k]].patch);
        labels.push_back(detail::class_index(samples[train[start + k]].label));
      }
      zero_grads(named);
      Tape<T> tape;
      Var logits = model.forward(tape, tape.constant(detail::stack<T>(ptrs)));
      Var loss = softmax_cross_entropy(tape, logits, std::span<const int>(labels));
      tape.backward(loss);
      adam_step(std::span<Tensor<T>* const>(params), adam);
      loss_sum += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(n);
    }
    const double acc = accuracy(model);
    result.report.epoch_losses.push_back(loss_sum / static_cast<double>(train.size()));
    result.report.epoch_accuracies.push_back(acc);
    result.report.epochs_run = epoch + 1;
    if (acc > best_acc) {
      best_acc = acc;
      best = model;
      stale = 0;
    } else if (++stale >= opt.patience) {
      break;
    }
  }
  result.model = std::move(best);
  result.report.heldout_accuracy = best_acc;
  return result;
}

// ---------------------------------------------------------------------------
// Pattern harvesting and pair synthesis

/// Zero-mean residual of an A-type patch.
struct ArtifactPattern {
  std::array<double, kPatchPixels> values{};
};

inline ArtifactPattern extract_artifact_pattern(const Patch& a_patch) {
  double mean = 0;
  for (float v : a_patch.values) mean += v;
  mean /= static_cast<double>(kPatchPixels);
  ArtifactPattern out;
  for (std::size_t i = 0; i < kPatchPixels; ++i) out.values[i] = static_cast<double>(a_patch.values[i]) - mean;
  return out;
}

struct PairedPatch {
  Patch dirty;
  Patch clean;
  bool is_identity = false;
  std::int64_t pattern_index = -1;  ///< index into the pattern pool, -1 for identity pairs
};

/// dirty = clamp(clean + pattern, 0, 1), pixelwise.
inline Patch superpose(const Patch& clean, const ArtifactPattern& pattern) {
  Patch dirty = clean;
  for (std::size_t i = 0; i < kPatchPixels; ++i)
    dirty.values[i] = static_cast<float>(std::clamp(static_cast<double>(clean.values[i]) + pattern.values[i], 0.0, 1.0));
  return dirty;
}

struct SynthesisOptions {
  std::size_t target_count = 100000;
  double identity_fraction = 0.1;
};

/// Generates exactly `target_count` pairs. Item i draws from its own stream
/// derived from (base seed, i): with probability identity_fraction it is an
/// identity pair of a uniformly drawn pool patch, otherwise a uniformly drawn
/// pool patch (clean) plus a uniformly drawn pattern (dirty).
inline std::vector<PairedPatch> synthesize_pairs(const std::vector<ArtifactPattern>& patterns,
                                                 const std::vector<Patch>& pool, const SynthesisOptions& opt, Rng& rng) {
  if (patterns.empty()) throw NoArtifactPatchesError();
  if (pool.empty()) throw ContractError("synthesize_pairs: empty patch pool");
  const std::uint64_t base = rng.next_u64();
  std::vector<PairedPatch> out(opt.target_count);
  for (std::size_t i = 0; i < opt.target_count; ++i) {
    Rng item = Rng::derived(base, i);
    PairedPatch& pair = out[i];
    const bool identity = item.uniform() < opt.identity_fraction;
    pair.clean = pool[item.index(pool.size())];
    if (identity) {
      pair.dirty = pair.clean;
      pair.is_identity = true;
    } else {
      const std::size_t k = item.index(patterns.size());
      pair.dirty = superpose(pair.clean, patterns[k]);
      pair.pattern_index = static_cast<std::int64_t>(k);
    }
  }
  return out;
}

// Pair dump: u64 little-endian count, then per pair 1024 f32 (dirty) followed
// by 1024 f32 (clean), all little-endian, row-major.

inline void write_pairs(const std::filesystem::path& path, const std::vector<PairedPatch>& pairs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  auto put_u32 = [&](std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>(v >> (8 * i));
    out.write(b, 4);
  };
  const std::uint64_t n = pairs.size();
  put_u32(static_cast<std::uint32_t>(n));
  put_u32(static_cast<std::uint32_t>(n >> 32));
  for (const auto& p : pairs) {
    for (float v : p.dirty.values) put_u32(std::bit_cast<std::uint32_t>(v));
    for (float v : p.clean.values) put_u32(std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw IoError("short write to " + path.string());
}

/// Reads a pair dump; identity flags are recovered from dirty == clean.
inline std::vector<PairedPatch> read_pairs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto get_u32 = [&]() {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("pair dump: truncated");
    return static_cast<std::uint32_t>(b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24));
  };
  const std::uint64_t lo = get_u32();
  const std::uint64_t n = lo | (static_cast<std::uint64_t>(get_u32()) << 32);
  std::vector<PairedPatch> pairs;
  for (std::uint64_t i = 0; i < n; ++i) {
    PairedPatch p;
    for (float& v : p.dirty.values) v = std::bit_cast<float>(get_u32());
    for (float& v : p.clean.values) v = std::bit_cast<float>(get_u32());
    p.is_identity = p.dirty.values == p.clean.values;
    pairs.push_back(p);
  }
  return pairs;
}

}  // namespace osar
