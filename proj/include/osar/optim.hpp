#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "osar/errors.hpp"
#include "osar/rng.hpp"
#include "osar/tensor.hpp"

namespace osar {

/// Glorot/Xavier uniform initialization.
///
/// Rank-2 shapes are M x N fully connected weights (fan_in = N, fan_out = M);
/// rank-4 shapes are Cout x Cin x kh x kw kernels (fan_in = Cin*kh*kw,
/// fan_out = Cout*kh*kw).
template <std::floating_point T>
Tensor<T> xavier_init(const Shape& shape, Rng& rng) {
  if (shape.size() < 2) throw ContractError("xavier_init needs at least a 2-D shape, got " + shape_string(shape));
  const std::size_t receptive = shape_size(shape) / (shape[0] * shape[1]);
  const double fan_in = static_cast<double>(shape[1] * receptive);
  const double fan_out = static_cast<double>(shape[0] * receptive);
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor<T> out(shape);
  for (T& v : out.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return out;
}

template <std::floating_point T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::size_t t = 0;
  double learning_rate = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One Adam update with bias correction over every parameter's grad buffer.
/// State buffers are created on the first call and must match afterwards.
template <std::floating_point T>
void adam_step(std::span<Tensor<T>* const> params, AdamState<T>& state) {
  if (state.m.empty()) {
    for (const Tensor<T>* p : params) {
      state.m.emplace_back(p->size(), T{0});
      state.v.emplace_back(p->size(), T{0});
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: state has a different parameter count");
  ++state.t;
  const double correction1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double correction2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    if (state.m[i].size() != p.size()) throw ContractError("adam_step: state shape does not match parameter");
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto values = p.data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      const double m_hat = static_cast<double>(m[j]) / correction1;
      const double v_hat = static_cast<double>(v[j]) / correction2;
      values[j] -= static_cast<T>(state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon));
    }
  }
}

}  // namespace osar
