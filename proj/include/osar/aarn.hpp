#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "osar/errors.hpp"
#include "osar/idsn.hpp"
#include "osar/image.hpp"
#include "osar/layers.hpp"
#include "osar/ops.hpp"
#include "osar/optim.hpp"
#include "osar/patch.hpp"
#include "osar/rng.hpp"
#include "osar/tape.hpp"

// Attentive artifact reduction network: a two-step recurrent attention block
// with shared weights feeding a 10-layer contextual autoencoder, trained on
// synthesized dirty/clean pairs with attention supervision and a multi-scale
// reconstruction loss.

namespace osar {

/// Channel widths of the network. The default is the full-size model; micro()
/// shrinks every layer for gradient checks.
struct AarnArchitecture {
  std::size_t attention_channels = 32;
  std::array<std::size_t, 4> encoder{32, 64, 64, 64};    // layers 1-4
  std::array<std::size_t, 5> decoder{64, 64, 32, 32, 16};  // layers 5-9; layer 10 emits the image

  static AarnArchitecture micro(std::size_t c = 4) { return {c, {c, c, c, c}, {c, c, c, c, c}}; }

  friend bool operator==(const AarnArchitecture&, const AarnArchitecture&) = default;
};

struct LossWeights {
  std::array<double, 2> attention{0.8, 1.0};   // time steps 1, 2
  std::array<double, 3> scales{0.6, 0.8, 1.0};  // decoder layers 5, 7, 9
};

template <std::floating_point T>
struct AarnModel {
  AarnArchitecture arch;
  // attention block, shared across both time steps
  ConvLayer<T> att_in, att_mid, att_head;
  // autoencoder layers 1..10 (index 0..9)
  std::array<ConvLayer<T>, 10> layers;
  // 1x1 image heads on decoder layers 5 and 7; layer 10 is the layer-9 head
  ConvLayer<T> side5, side7;

  static AarnModel make(const AarnArchitecture& a, Rng& rng) {
    const std::size_t ac = a.attention_channels;
    const auto& e = a.encoder;
    const auto& d = a.decoder;
    AarnModel m;
    m.arch = a;
    m.att_in = ConvLayer<T>::make(2, ac, 3, 1, rng);
    m.att_mid = ConvLayer<T>::make(ac, ac, 3, 1, rng);
    m.att_head = ConvLayer<T>::make(ac, 1, 3, 1, rng);
    m.layers[0] = ConvLayer<T>::make(2, e[0], 3, 1, rng);
    m.layers[1] = ConvLayer<T>::make(e[0], e[1], 3, 2, rng);
    m.layers[2] = ConvLayer<T>::make(e[1], e[2], 3, 2, rng);
    m.layers[3] = ConvLayer<T>::make(e[2], e[3], 3, 1, rng);
    m.layers[4] = ConvLayer<T>::make(e[3], d[0], 3, 1, rng);
    m.layers[5] = ConvLayer<T>::make(d[0], d[1], 3, 1, rng);
    m.layers[6] = ConvLayer<T>::make(d[1] + e[1], d[2], 3, 1, rng);
    m.layers[7] = ConvLayer<T>::make(d[2], d[3], 3, 1, rng);
    m.layers[8] = ConvLayer<T>::make(d[3] + e[0], d[4], 3, 1, rng);
    m.layers[9] = ConvLayer<T>::make(d[4], 1, 3, 1, rng);
    m.side5 = ConvLayer<T>::make(d[0], 1, 1, 1, rng);
    m.side7 = ConvLayer<T>::make(d[2], 1, 1, 1, rng);
    return m;
  }

  std::vector<NamedParameter<T>> parameters() {
    std::vector<NamedParameter<T>> out;
    append_parameters(out, "attention.in", att_in);
    append_parameters(out, "attention.mid", att_mid);
    append_parameters(out, "attention.head", att_head);
    for (std::size_t i = 0; i < layers.size(); ++i) append_parameters(out, "ae" + std::to_string(i + 1), layers[i]);
    append_parameters(out, "side5", side5);
    append_parameters(out, "side7", side7);
    return out;
  }
};

/// Values produced by one forward pass. f9 is also the restored image.
struct AarnForward {
  Var a1, a2;
  Var f5, f7, f9;
};

/// Runs the network on a B x 1 x H x W input with H, W divisible by 4.
/// With attention disabled both maps are the constant 0.5 prior and the
/// attention block is skipped.
template <std::floating_point T>
AarnForward forward_aarn(AarnModel<T>& m, Tape<T>& tape, Var image, bool attention_enabled = true) {
  const Shape& s = tape.shape(image);
  if (s.size() != 4 || s[1] != 1) throw DimensionError("forward_aarn: expected B x 1 x H x W, got " + shape_string(s));
  if (s[2] < kPatchSize || s[3] < kPatchSize) throw SizeError("forward_aarn: input smaller than 32x32");
  if (s[2] % 4 || s[3] % 4) throw DimensionError("forward_aarn: spatial dims must be multiples of 4");

  AarnForward f{};
  Var prior = tape.constant(Tensor<T>(s, T{0.5}));
  if (attention_enabled) {
    auto step = [&](Var previous) {
      Var h1 = relu(tape, m.att_in(tape, concat_channels(tape, image, previous)));
      Var h2 = relu(tape, add(tape, m.att_mid(tape, h1), h1));
      return sigmoid(tape, m.att_head(tape, h2));
    };
    f.a1 = step(prior);
    f.a2 = step(f.a1);
  } else {
    f.a1 = f.a2 = prior;
  }

  auto& L = m.layers;
  Var e1 = relu(tape, L[0](tape, concat_channels(tape, image, f.a2)));
  Var e2 = relu(tape, L[1](tape, e1));
  Var h = relu(tape, L[2](tape, e2));
  h = relu(tape, L[3](tape, h));
  Var d5 = relu(tape, L[4](tape, h));
  f.f5 = sigmoid(tape, m.side5(tape, d5));
  h = relu(tape, L[5](tape, upsample_nearest_2x(tape, d5)));
  Var d7 = relu(tape, L[6](tape, concat_channels(tape, h, e2)));
  f.f7 = sigmoid(tape, m.side7(tape, d7));
  h = relu(tape, L[7](tape, upsample_nearest_2x(tape, d7)));
  Var d9 = relu(tape, L[8](tape, concat_channels(tape, h, e1)));
  f.f9 = sigmoid(tape, L[9](tape, d9));
  return f;
}

// ---------------------------------------------------------------------------
// Losses

/// Per-pixel artifact indicator: 1 where |dirty - clean| > threshold (strict).
inline std::vector<float> make_binary_map(std::span<const float> dirty, std::span<const float> clean,
                                          float threshold = 0.01f) {
  if (dirty.size() != clean.size()) throw DimensionError("make_binary_map: dirty and clean differ in size");
  std::vector<float> out(dirty.size());
  for (std::size_t i = 0; i < dirty.size(); ++i) out[i] = std::abs(dirty[i] - clean[i]) > threshold ? 1.0f : 0.0f;
  return out;
}

inline std::vector<float> make_binary_map(const Patch& dirty, const Patch& clean, float threshold = 0.01f) {
  return make_binary_map(std::span<const float>(dirty.values), std::span<const float>(clean.values), threshold);
}

/// 0.8 * MSE(A1, M) + MSE(A2, M)
template <std::floating_point T>
Var attention_loss(Tape<T>& tape, Var a1, Var a2, Var map, const LossWeights& w = {}) {
  return weighted_sum(tape, {std::pair{mse_loss(tape, a1, map), static_cast<T>(w.attention[0])},
                             std::pair{mse_loss(tape, a2, map), static_cast<T>(w.attention[1])}});
}

/// Σ w_i * MSE(F_i, T_i) over decoder layers 5, 7, 9.
template <std::floating_point T>
Var multiscale_loss(Tape<T>& tape, const std::array<Var, 3>& features, const std::array<Var, 3>& targets,
                    const LossWeights& w = {}) {
  std::array<std::pair<Var, T>, 3> terms;
  for (std::size_t i = 0; i < 3; ++i)
    terms[i] = {mse_loss(tape, features[i], targets[i]), static_cast<T>(w.scales[i])};
  return weighted_sum(tape, std::span<const std::pair<Var, T>>(terms));
}

template <std::floating_point T>
struct AarnLoss {
  Var attention;
  Var multiscale;
  Var total;
};

/// L_ATT + L_M. When `with_attention` is false only the multi-scale term is used.
template <std::floating_point T>
AarnLoss<T> total_loss(Tape<T>& tape, const AarnForward& f, Var map, const std::array<Var, 3>& targets,
                       bool with_attention = true, const LossWeights& w = {}) {
  AarnLoss<T> loss{};
  loss.multiscale = multiscale_loss(tape, {f.f5, f.f7, f.f9}, targets, w);
  if (!with_attention) {
    loss.total = loss.multiscale;
    return loss;
  }
  loss.attention = attention_loss(tape, f.a1, f.a2, map, w);
  loss.total = weighted_sum(tape, {std::pair{loss.attention, T{1}}, std::pair{loss.multiscale, T{1}}});
  return loss;
}

/// Multi-scale targets of a B x 1 x H x W clean batch: 4x-, 2x-pooled, full.
template <std::floating_point T>
std::array<Tensor<T>, 3> multiscale_targets(const Tensor<T>& clean) {
  Tensor<T> half = average_pool_2x(clean);
  Tensor<T> quarter = average_pool_2x(half);
  return {std::move(quarter), std::move(half), clean};
}

// ---------------------------------------------------------------------------
// Training

struct AarnTrainOptions {
  std::size_t batch_size = 270;
  std::size_t max_epochs = 4;
  double learning_rate = 0.0005;
  bool attention_enabled = true;
  float threshold = 0.01f;
  /// Batches are evaluated in slices of this many pairs with gradient
  /// accumulation; bounds memory without changing the batch gradient.
  std::size_t micro_batch = 30;
  LossWeights weights{};
};

struct AarnTrainReport {
  std::vector<double> epoch_losses;  ///< pair-weighted mean total loss per epoch
};

/// Tensors for one slice of pairs: dirty input, binary map, multi-scale targets.
template <std::floating_point T>
struct PairBatch {
  Tensor<T> dirty;
  Tensor<T> map;
  std::array<Tensor<T>, 3> targets;
};

template <std::floating_point T>
PairBatch<T> make_pair_batch(std::span<const PairedPatch* const> pairs, float threshold) {
  std::vector<T> dirty, map, clean;
  const std::size_t n = pairs.size();
  dirty.reserve(n * kPatchPixels);
  map.reserve(n * kPatchPixels);
  clean.reserve(n * kPatchPixels);
  for (const PairedPatch* p : pairs) {
    dirty.insert(dirty.end(), p->dirty.values.begin(), p->dirty.values.end());
    clean.insert(clean.end(), p->clean.values.begin(), p->clean.values.end());
    const auto m = make_binary_map(p->dirty, p->clean, threshold);
    map.insert(map.end(), m.begin(), m.end());
  }
  const Shape shape{n, 1, kPatchSize, kPatchSize};
  return {Tensor<T>(shape, std::move(dirty)), Tensor<T>(shape, std::move(map)),
          multiscale_targets(Tensor<T>(shape, std::move(clean)))};
}

/// Adam on the total loss. Each epoch visits the pairs in a fresh permutation
/// drawn from `rng`; the last batch of an epoch may be smaller than batch_size.
/// `on_epoch(epoch, mean_loss)` is invoked after every epoch when provided.
template <std::floating_point T>
AarnTrainReport train_aarn(AarnModel<T>& model, const std::vector<PairedPatch>& pairs, Rng& rng,
                           const AarnTrainOptions& opt = {},
                           const std::function<void(std::size_t, double)>& on_epoch = {}) {
  if (pairs.empty()) throw ContractError("train_aarn: no training pairs");
  if (opt.batch_size == 0 || opt.micro_batch == 0) throw ContractError("train_aarn: batch sizes must be positive");
  auto named = model.parameters();
  const auto params = parameter_pointers(named);
  AdamState<T> adam;
  adam.learning_rate = opt.learning_rate;

  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  AarnTrainReport report;
  for (std::size_t epoch = 0; epoch < opt.max_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t batch = std::min(opt.batch_size, order.size() - start);
      zero_grads(named);
      for (std::size_t off = 0; off < batch; off += opt.micro_batch) {
        const std::size_t n = std::min(opt.micro_batch, batch - off);
        std::vector<const PairedPatch*> slice;
        for (std::size_t k = 0; k < n; ++k) slice.push_back(&pairs[order[start + off + k]]);
        PairBatch<T> data = make_pair_batch<T>(slice, opt.threshold);

        Tape<T> tape;
        Var x = tape.constant(std::move(data.dirty));
        Var map = tape.constant(std::move(data.map));
        const std::array<Var, 3> targets{tape.constant(std::move(data.targets[0])),
                                         tape.constant(std::move(data.targets[1])),
                                         tape.constant(std::move(data.targets[2]))};
        const AarnForward f = forward_aarn(model, tape, x, opt.attention_enabled);
        const auto loss = total_loss<T>(tape, f, map, targets, opt.attention_enabled, opt.weights);
        // every loss term is a mean over the slice, so weighting by the slice
        // share reproduces the full-batch mean
        const T share = static_cast<T>(n) / static_cast<T>(batch);
        Var scaled = weighted_sum(tape, {std::pair{loss.total, share}});
        tape.backward(scaled);
        epoch_loss += static_cast<double>(tape.value(loss.total)[0]) * static_cast<double>(n);
      }
      adam_step(std::span<Tensor<T>* const>(params), adam);
    }
    report.epoch_losses.push_back(epoch_loss / static_cast<double>(pairs.size()));
    if (on_epoch) on_epoch(epoch, report.epoch_losses.back());
  }
  return report;
}

// ---------------------------------------------------------------------------
// Inference

/// Restored image plus both attention maps. `output` and the maps are in
/// normalized units; `denoised` is `output` mapped back to the input's range.
struct InferenceResult {
  Image output;
  Image denoised;
  Image attention1;
  Image attention2;
};

namespace detail {

inline std::size_t reflect_index(std::size_t i, std::size_t n) { return i < n ? i : 2 * (n - 1) - i; }

}  // namespace detail

/// Runs the trained network over a whole normalized image. Sizes that are not
/// multiples of 4 are reflect-padded on the right/bottom and cropped back.
template <std::floating_point T>
InferenceResult infer(AarnModel<T>& model, const Image& normalized, bool attention_enabled = true) {
  if (normalized.width < kPatchSize || normalized.height < kPatchSize)
    throw SizeError("infer: image smaller than 32x32");
  const std::size_t w = normalized.width, h = normalized.height;
  const std::size_t pw = (w + 3) / 4 * 4, ph = (h + 3) / 4 * 4;
  Tensor<T> input({1, 1, ph, pw});
  for (std::size_t y = 0; y < ph; ++y)
    for (std::size_t x = 0; x < pw; ++x)
      input.at(0, 0, y, x) = static_cast<T>(normalized(detail::reflect_index(x, w), detail::reflect_index(y, h)));

  Tape<T> tape(Tape<T>::Mode::inference);
  const AarnForward f = forward_aarn(model, tape, tape.constant(std::move(input)), attention_enabled);

  auto crop = [&](Var v) {
    Image out = normalized;
    out.warnings.clear();
    const auto& t = tape.value(v);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out(x, y) = static_cast<double>(t.at(0, 0, y, x));
    return out;
  };
  InferenceResult r;
  r.output = crop(f.f9);
  r.denoised = denormalize(r.output);
  r.attention1 = crop(f.a1);
  r.attention2 = crop(f.a2);
  r.attention1.value_min = r.attention2.value_min = 0.0;
  r.attention1.value_max = r.attention2.value_max = 1.0;
  return r;
}

}  // namespace osar
