#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "osar/errors.hpp"
#include "osar/tape.hpp"
#include "osar/tensor.hpp"

// Differentiable operations recorded on a Tape. Every function validates its
// operand shapes, computes the forward value, and (when any operand requires
// gradient) records the closure that maps the output gradient back onto the
// operands.

namespace osar {

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixView = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixView = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t in_channels, height, width;
  std::size_t kernel_h, kernel_w, stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch_len() const { return in_channels * kernel_h * kernel_w; }
  std::size_t out_pixels() const { return out_h * out_w; }
};

/// Output columns [lo, hi) whose input column ox*stride + k - pad lies inside [0, width).
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t k) {
  std::size_t lo = 0;
  while (lo < g.out_w && lo * g.stride + k < g.padding) ++lo;
  std::size_t hi = g.out_w;
  while (hi > lo && (hi - 1) * g.stride + k >= g.padding + g.width) --hi;
  return {lo, hi};
}

/// Unrolls one C x H x W image into a (C*kh*kw) x (oh*ow) column matrix.
template <class T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * g.out_pixels();
        const T* plane = image + c * g.height * g.width;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          T* dst = row + oy * g.out_w;
          const std::size_t iy_shifted = oy * g.stride + ky;
          if (iy_shifted < g.padding || iy_shifted >= g.padding + g.height) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = plane + (iy_shifted - g.padding) * g.width + kx;
          std::fill(dst, dst + lo, T{0});
          if (g.stride == 1) {
            std::copy(src + lo - g.padding, src + hi - g.padding, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride - g.padding];
          }
          std::fill(dst + hi, dst + g.out_w, T{0});
        }
      }
}

/// Scatter-adds a column matrix back onto a C x H x W image (adjoint of im2col).
template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* image) {
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * g.out_pixels();
        T* plane = image + c * g.height * g.width;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::size_t iy_shifted = oy * g.stride + ky;
          if (iy_shifted < g.padding || iy_shifted >= g.padding + g.height) continue;
          const T* src = row + oy * g.out_w;
          T* dst = plane + (iy_shifted - g.padding) * g.width + kx - g.padding;
          if (g.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
}

template <class T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

/// 2-D convolution with zero padding: B x Cin x H x W  *  Cout x Cin x kh x kw  ->  B x Cout x H' x W'.
template <std::floating_point T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Var bias, std::size_t stride, std::size_t padding) {
  const Shape& xs = tape.shape(input);
  const Shape& ks = tape.shape(kernel);
  detail::require_rank(xs, 4, "conv2d input");
  detail::require_rank(ks, 4, "conv2d kernel");
  if (xs[1] != ks[1])
    throw DimensionError("conv2d: input has " + std::to_string(xs[1]) + " channels, kernel expects " +
                         std::to_string(ks[1]));
  if (tape.shape(bias) != Shape{ks[0]}) throw DimensionError("conv2d: bias must have shape [Cout]");
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  if (xs[2] + 2 * padding < ks[2] || xs[3] + 2 * padding < ks[3])
    throw DimensionError("conv2d: kernel " + shape_string(ks) + " larger than padded input " + shape_string(xs));

  detail::ConvGeometry g{xs[1], xs[2], xs[3], ks[2], ks[3], stride, padding, 0, 0};
  g.out_h = (g.height + 2 * padding - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel_w) / stride + 1;
  const std::size_t batch = xs[0], out_channels = ks[0];
  const std::size_t in_len = g.in_channels * g.height * g.width, out_len = out_channels * g.out_pixels();

  Tensor<T> out({batch, out_channels, g.out_h, g.out_w});
  std::vector<T> cols(g.patch_len() * g.out_pixels());
  {
    const auto& x = tape.value(input);
    detail::ConstMatrixView<T> w(tape.value(kernel).data().data(), out_channels, g.patch_len());
    const auto& b = tape.value(bias);
    for (std::size_t n = 0; n < batch; ++n) {
      detail::im2col(x.data().data() + n * in_len, g, cols.data());
      detail::ConstMatrixView<T> c(cols.data(), g.patch_len(), g.out_pixels());
      detail::MatrixView<T> y(out.data().data() + n * out_len, out_channels, g.out_pixels());
      y.noalias() = w * c;
      for (std::size_t o = 0; o < out_channels; ++o) y.row(o).array() += b[o];
    }
  }

  const bool rg = tape.requires_grad(input) || tape.requires_grad(kernel) || tape.requires_grad(bias);
  return tape.record(std::move(out), rg, [=](Tape<T>& t, Var self) {
    const auto dy_all = t.grad(self);
    const auto& x = t.value(input);
    const auto& k = t.value(kernel);
    const bool need_x = t.requires_grad(input), need_w = t.requires_grad(kernel), need_b = t.requires_grad(bias);
    // Stride-1 "same" convolutions propagate to the input as a convolution of
    // dY with the flipped, channel-transposed kernel; other geometries scatter
    // through col2im.
    const bool same = stride == 1 && g.kernel_h == g.kernel_w && g.kernel_h % 2 == 1 &&
                      padding == g.kernel_h / 2;
    detail::ConvGeometry back{out_channels, g.out_h, g.out_w, g.kernel_h, g.kernel_w, 1, padding, g.height, g.width};
    std::vector<T> flipped;
    if (need_x && same) {
      flipped.resize(k.size());
      const std::size_t kk = g.kernel_h * g.kernel_w;
      for (std::size_t co = 0; co < out_channels; ++co)
        for (std::size_t ci = 0; ci < g.in_channels; ++ci)
          for (std::size_t j = 0; j < kk; ++j)
            flipped[(ci * out_channels + co) * kk + (kk - 1 - j)] = k[(co * g.in_channels + ci) * kk + j];
    }
    detail::ConstMatrixView<T> w(k.data().data(), out_channels, g.patch_len());
    detail::ConstMatrixView<T> wf(flipped.data(), g.in_channels, back.patch_len());
    std::vector<T> col_buf(std::max(g.patch_len() * g.out_pixels(), same ? back.patch_len() * back.out_pixels() : 0));
    for (std::size_t n = 0; n < batch; ++n) {
      detail::ConstMatrixView<T> dy(dy_all.data() + n * out_len, out_channels, g.out_pixels());
      if (need_w) {
        detail::im2col(x.data().data() + n * in_len, g, col_buf.data());
        detail::ConstMatrixView<T> c(col_buf.data(), g.patch_len(), g.out_pixels());
        detail::MatrixView<T> dw(t.grad(kernel).data(), out_channels, g.patch_len());
        dw.noalias() += dy * c.transpose();
      }
      if (need_b) {
        auto db = t.grad(bias);
        // plain loop: Eigen's vectorized sum picks its split from the buffer
        // address, which would make the rounding allocation-dependent
        const T* d = dy_all.data() + n * out_len;
        for (std::size_t o = 0; o < out_channels; ++o) {
          T s{0};
          for (std::size_t i = 0; i < g.out_pixels(); ++i) s += d[o * g.out_pixels() + i];
          db[o] += s;
        }
      }
      if (need_x && same) {
        detail::im2col(dy_all.data() + n * out_len, back, col_buf.data());
        detail::ConstMatrixView<T> c(col_buf.data(), back.patch_len(), back.out_pixels());
        detail::MatrixView<T> dx(t.grad(input).data() + n * in_len, g.in_channels, g.height * g.width);
        dx.noalias() += wf * c;
      } else if (need_x) {
        detail::MatrixView<T> dc(col_buf.data(), g.patch_len(), g.out_pixels());
        dc.noalias() = w.transpose() * dy;
        detail::col2im_add(col_buf.data(), g, t.grad(input).data() + n * in_len);
      }
    }
  });
}

/// Affine layer: B x N input, M x N weight, M bias -> B x M.
template <std::floating_point T>
Var fully_connected(Tape<T>& tape, Var input, Var weight, Var bias) {
  const Shape& xs = tape.shape(input);
  const Shape& ws = tape.shape(weight);
  detail::require_rank(xs, 2, "fully_connected input");
  detail::require_rank(ws, 2, "fully_connected weight");
  if (xs[1] != ws[1])
    throw DimensionError("fully_connected: input width " + std::to_string(xs[1]) + " != weight width " +
                         std::to_string(ws[1]));
  if (tape.shape(bias) != Shape{ws[0]}) throw DimensionError("fully_connected: bias must have shape [M]");
  const std::size_t batch = xs[0], in_dim = xs[1], out_dim = ws[0];

  Tensor<T> out({batch, out_dim});
  {
    detail::ConstMatrixView<T> x(tape.value(input).data().data(), batch, in_dim);
    detail::ConstMatrixView<T> w(tape.value(weight).data().data(), out_dim, in_dim);
    detail::MatrixView<T> y(out.data().data(), batch, out_dim);
    y.noalias() = x * w.transpose();
    const auto& b = tape.value(bias);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t m = 0; m < out_dim; ++m) y(n, m) += b[m];
  }
  const bool rg = tape.requires_grad(input) || tape.requires_grad(weight) || tape.requires_grad(bias);
  return tape.record(std::move(out), rg, [=](Tape<T>& t, Var self) {
    detail::ConstMatrixView<T> dy(t.grad(self).data(), batch, out_dim);
    if (t.requires_grad(input)) {
      detail::ConstMatrixView<T> w(t.value(weight).data().data(), out_dim, in_dim);
      detail::MatrixView<T> dx(t.grad(input).data(), batch, in_dim);
      dx.noalias() += dy * w;
    }
    if (t.requires_grad(weight)) {
      detail::ConstMatrixView<T> x(t.value(input).data().data(), batch, in_dim);
      detail::MatrixView<T> dw(t.grad(weight).data(), out_dim, in_dim);
      dw.noalias() += dy.transpose() * x;
    }
    if (t.requires_grad(bias)) {
      auto db = t.grad(bias);
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t m = 0; m < out_dim; ++m) db[m] += dy(n, m);
    }
  });
}

template <std::floating_point T>
Var relu(Tape<T>& tape, Var input) {
  Tensor<T> out = tape.value(input);
  for (T& v : out.data()) v = std::max(v, T{0});
  return tape.record(std::move(out), tape.requires_grad(input), [=](Tape<T>& t, Var self) {
    const auto& y = t.value(self);
    const auto dy = t.grad(self);
    auto dx = t.grad(input);
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (y[i] > T{0}) dx[i] += dy[i];
  });
}

template <std::floating_point T>
Var sigmoid(Tape<T>& tape, Var input) {
  Tensor<T> out = tape.value(input);
  for (T& v : out.data()) v = T{1} / (T{1} + std::exp(-v));
  return tape.record(std::move(out), tape.requires_grad(input), [=](Tape<T>& t, Var self) {
    const auto& y = t.value(self);
    const auto dy = t.grad(self);
    auto dx = t.grad(input);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * y[i] * (T{1} - y[i]);
  });
}

/// Elementwise sum of two same-shaped values.
template <std::floating_point T>
Var add(Tape<T>& tape, Var a, Var b) {
  if (tape.shape(a) != tape.shape(b))
    throw DimensionError("add: shape mismatch " + shape_string(tape.shape(a)) + " vs " + shape_string(tape.shape(b)));
  Tensor<T> out = tape.value(a);
  detail::accumulate<T>(out.data(), tape.value(b).data());
  return tape.record(std::move(out), tape.requires_grad(a) || tape.requires_grad(b), [=](Tape<T>& t, Var self) {
    const auto dy = t.grad(self);
    if (t.requires_grad(a)) detail::accumulate<T>(t.grad(a), dy);
    if (t.requires_grad(b)) detail::accumulate<T>(t.grad(b), dy);
  });
}

/// Reinterprets the value under a new shape with the same element count.
template <std::floating_point T>
Var reshape(Tape<T>& tape, Var input, Shape shape) {
  Tensor<T> out = tape.value(input).reshaped(std::move(shape));
  return tape.record(std::move(out), tape.requires_grad(input),
                     [=](Tape<T>& t, Var self) { detail::accumulate<T>(t.grad(input), t.grad(self)); });
}

/// Flattens B x ... to B x N.
template <std::floating_point T>
Var flatten(Tape<T>& tape, Var input) {
  const Shape& s = tape.shape(input);
  return reshape(tape, input, Shape{s[0], shape_size(s) / s[0]});
}

/// Nearest-neighbour 2x upsampling: every pixel becomes a 2x2 block.
template <std::floating_point T>
Var upsample_nearest_2x(Tape<T>& tape, Var input) {
  const Shape& s = tape.shape(input);
  detail::require_rank(s, 4, "upsample_nearest_2x");
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  Tensor<T> out({s[0], s[1], 2 * h, 2 * w});
  {
    const auto in = tape.value(input).data();
    auto o = out.data();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t x = 0; x < 2 * w; ++x) o[(p * 2 * h + y) * 2 * w + x] = in[(p * h + y / 2) * w + x / 2];
  }
  return tape.record(std::move(out), tape.requires_grad(input), [=](Tape<T>& t, Var self) {
    const auto dy = t.grad(self);
    auto dx = t.grad(input);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t x = 0; x < 2 * w; ++x) dx[(p * h + y / 2) * w + x / 2] += dy[(p * 2 * h + y) * 2 * w + x];
  });
}

/// Concatenates two B x C x H x W values along the channel axis.
template <std::floating_point T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
  const Shape& as = tape.shape(a);
  const Shape& bs = tape.shape(b);
  detail::require_rank(as, 4, "concat_channels");
  detail::require_rank(bs, 4, "concat_channels");
  if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
    throw DimensionError("concat_channels: batch/spatial mismatch " + shape_string(as) + " vs " + shape_string(bs));
  const std::size_t batch = as[0], plane = as[2] * as[3];
  const std::size_t a_len = as[1] * plane, b_len = bs[1] * plane;
  Tensor<T> out({batch, as[1] + bs[1], as[2], as[3]});
  {
    const auto av = tape.value(a).data();
    const auto bv = tape.value(b).data();
    auto o = out.data();
    for (std::size_t n = 0; n < batch; ++n) {
      std::copy_n(av.begin() + n * a_len, a_len, o.begin() + n * (a_len + b_len));
      std::copy_n(bv.begin() + n * b_len, b_len, o.begin() + n * (a_len + b_len) + a_len);
    }
  }
  return tape.record(std::move(out), tape.requires_grad(a) || tape.requires_grad(b), [=](Tape<T>& t, Var self) {
    const auto dy = t.grad(self);
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t base = n * (a_len + b_len);
      if (t.requires_grad(a)) detail::accumulate<T>(t.grad(a).subspan(n * a_len, a_len), dy.subspan(base, a_len));
      if (t.requires_grad(b))
        detail::accumulate<T>(t.grad(b).subspan(n * b_len, b_len), dy.subspan(base + a_len, b_len));
    }
  });
}

/// Mean squared error over all elements; returns a scalar.
template <std::floating_point T>
Var mse_loss(Tape<T>& tape, Var pred, Var target) {
  if (tape.shape(pred) != tape.shape(target))
    throw DimensionError("mse_loss: shape mismatch " + shape_string(tape.shape(pred)) + " vs " +
                         shape_string(tape.shape(target)));
  const auto p = tape.value(pred).data();
  const auto q = tape.value(target).data();
  const std::size_t count = p.size();
  double sum = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(q[i]);
    sum += d * d;
  }
  Tensor<T> out({1}, static_cast<T>(sum / static_cast<double>(count)));
  const bool rg = tape.requires_grad(pred) || tape.requires_grad(target);
  return tape.record(std::move(out), rg, [=](Tape<T>& t, Var self) {
    const T scale = T{2} * t.grad(self)[0] / static_cast<T>(count);
    const auto pv = t.value(pred).data();
    const auto qv = t.value(target).data();
    if (t.requires_grad(pred)) {
      auto g = t.grad(pred);
      for (std::size_t i = 0; i < count; ++i) g[i] += scale * (pv[i] - qv[i]);
    }
    if (t.requires_grad(target)) {
      auto g = t.grad(target);
      for (std::size_t i = 0; i < count; ++i) g[i] -= scale * (pv[i] - qv[i]);
    }
  });
}

/// Mean over the batch of -log softmax(logits)[label], computed with max subtraction.
template <std::floating_point T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels) {
  const Shape& s = tape.shape(logits);
  detail::require_rank(s, 2, "softmax_cross_entropy");
  const std::size_t batch = s[0], classes = s[1];
  if (labels.size() != batch) throw DimensionError("softmax_cross_entropy: one label per row required");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= classes)
      throw IndexError("softmax_cross_entropy: label " + std::to_string(l) + " outside [0, " +
                       std::to_string(classes) + ")");

  const auto z = tape.value(logits).data();
  std::vector<T> probs(batch * classes);
  double total = 0;
  for (std::size_t n = 0; n < batch; ++n) {
    const T* row = z.data() + n * classes;
    const T peak = *std::max_element(row, row + classes);
    double denom = 0;
    for (std::size_t k = 0; k < classes; ++k) denom += std::exp(static_cast<double>(row[k] - peak));
    for (std::size_t k = 0; k < classes; ++k)
      probs[n * classes + k] = static_cast<T>(std::exp(static_cast<double>(row[k] - peak)) / denom);
    total += std::log(denom) - static_cast<double>(row[labels[n]] - peak);
  }
  Tensor<T> out({1}, static_cast<T>(total / static_cast<double>(batch)));
  std::vector<int> label_copy(labels.begin(), labels.end());
  return tape.record(std::move(out), tape.requires_grad(logits),
                     [=, probs = std::move(probs), label_copy = std::move(label_copy)](Tape<T>& t, Var self) {
                       const T scale = t.grad(self)[0] / static_cast<T>(batch);
                       auto g = t.grad(logits);
                       for (std::size_t n = 0; n < batch; ++n)
                         for (std::size_t k = 0; k < classes; ++k) {
                           const T onehot = static_cast<int>(k) == label_copy[n] ? T{1} : T{0};
                           g[n * classes + k] += scale * (probs[n * classes + k] - onehot);
                         }
                     });
}

/// Σ weight_i · term_i over scalar terms.
template <std::floating_point T>
Var weighted_sum(Tape<T>& tape, std::span<const std::pair<Var, T>> terms) {
  T total{0};
  bool rg = false;
  for (const auto& [v, w] : terms) {
    if (tape.value(v).size() != 1) throw DimensionError("weighted_sum: terms must be scalars");
    total += w * tape.value(v)[0];
    rg = rg || tape.requires_grad(v);
  }
  std::vector<std::pair<Var, T>> copy(terms.begin(), terms.end());
  return tape.record(Tensor<T>({1}, total), rg, [copy = std::move(copy)](Tape<T>& t, Var self) {
    const T dy = t.grad(self)[0];
    for (const auto& [v, w] : copy)
      if (t.requires_grad(v)) t.grad(v)[0] += w * dy;
  });
}

template <std::floating_point T>
Var weighted_sum(Tape<T>& tape, std::initializer_list<std::pair<Var, T>> terms) {
  return weighted_sum(tape, std::span<const std::pair<Var, T>>(terms.begin(), terms.size()));
}

}  // namespace osar
