#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "osar/ops.hpp"
#include "osar/optim.hpp"
#include "osar/rng.hpp"
#include "osar/tape.hpp"
#include "osar/tensor.hpp"

namespace osar {

/// Convolution weights plus their fixed geometry. Bias starts at zero.
template <std::floating_point T>
struct ConvLayer {
  Tensor<T> weight;
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 1;

  static ConvLayer make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng) {
    return {xavier_init<T>({out, in, kernel, kernel}, rng), Tensor<T>({out}), stride, kernel / 2};
  }

  Var operator()(Tape<T>& tape, Var x) {
    return conv2d(tape, x, tape.parameter(weight), tape.parameter(bias), stride, padding);
  }
};

template <std::floating_point T>
struct DenseLayer {
  Tensor<T> weight;
  Tensor<T> bias;

  static DenseLayer make(std::size_t in, std::size_t out, Rng& rng) {
    return {xavier_init<T>({out, in}, rng), Tensor<T>({out})};
  }

  Var operator()(Tape<T>& tape, Var x) {
    return fully_connected(tape, x, tape.parameter(weight), tape.parameter(bias));
  }
};

template <std::floating_point T>
using NamedParameter = std::pair<std::string, Tensor<T>*>;

template <std::floating_point T>
void append_parameters(std::vector<NamedParameter<T>>& out, const std::string& name, ConvLayer<T>& layer) {
  out.emplace_back(name + ".weight", &layer.weight);
  out.emplace_back(name + ".bias", &layer.bias);
}

template <std::floating_point T>
void append_parameters(std::vector<NamedParameter<T>>& out, const std::string& name, DenseLayer<T>& layer) {
  out.emplace_back(name + ".weight", &layer.weight);
  out.emplace_back(name + ".bias", &layer.bias);
}

template <std::floating_point T>
std::vector<Tensor<T>*> parameter_pointers(const std::vector<NamedParameter<T>>& named) {
  std::vector<Tensor<T>*> out;
  out.reserve(named.size());
  for (const auto& [_, p] : named) out.push_back(p);
  return out;
}

template <std::floating_point T>
void zero_grads(const std::vector<NamedParameter<T>>& named) {
  for (const auto& [_, p] : named) p->zero_grad();
}

/// Stacks patches into a B x 1 x 32 x 32 tensor.
template <std::floating_point T, class PatchRange, class Getter>
Tensor<T> stack_patches(const PatchRange& items, Getter&& get) {
  std::vector<T> data;
  data.reserve(items.size() * 1024);
  for (const auto& item : items) {
    const auto& values = get(item);
    data.insert(data.end(), values.begin(), values.end());
  }
  return Tensor<T>({items.size(), 1, 32, 32}, std::move(data));
}

}  // namespace osar
