#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "hmtl/error.hpp"
#include "hmtl/tensor.hpp"

// Dense layer kernels used by the model. Every reduction runs in a fixed,
// documented order so that serial and distributed training can be compared
// at 1e-10 tolerances:
//   linear_forward   accumulates over the `in` index in ascending order
//   linear_backward  dW/db accumulate over `batch` ascending, dx over `out`
//   segment_sum      accumulates rows in ascending edge-index order
namespace hmtl::num {

// y[b,o] = bias[o] + sum_i x[b,i] * W[i,o]
template <typename S>
void linear_forward_span(const S* x, size_t batch, size_t in, const S* W,
                         size_t out, const S* bias, S* y) {
  for (size_t b = 0; b < batch; ++b) {
    S* yb = y + b * out;
    for (size_t o = 0; o < out; ++o) yb[o] = bias ? bias[o] : S(0);
    const S* xb = x + b * in;
    for (size_t i = 0; i < in; ++i) {
      const S xi = xb[i];
      const S* Wi = W + i * out;
      for (size_t o = 0; o < out; ++o) yb[o] += xi * Wi[o];
    }
  }
}

// dW[i,o] += sum_b x[b,i] * up[b,o]; db[o] += sum_b up[b,o];
// dx[b,i] = sum_o up[b,o] * W[i,o]
// dW/db accumulate into the given buffers (callers zero them per batch).
template <typename S>
void linear_backward_span(const S* x, size_t batch, size_t in, const S* W,
                          size_t out, const S* up, S* dW, S* db, S* dx) {
  for (size_t b = 0; b < batch; ++b) {
    const S* xb = x + b * in;
    const S* ub = up + b * out;
    for (size_t i = 0; i < in; ++i) {
      const S xi = xb[i];
      S* dWi = dW + i * out;
      for (size_t o = 0; o < out; ++o) dWi[o] += xi * ub[o];
    }
    for (size_t o = 0; o < out; ++o) db[o] += ub[o];
    if (dx) {
      S* dxb = dx + b * in;
      for (size_t i = 0; i < in; ++i) {
        const S* Wi = W + i * out;
        S acc = S(0);
        for (size_t o = 0; o < out; ++o) acc += ub[o] * Wi[o];
        dxb[i] = acc;
      }
    }
  }
}

// Project-wide activation: SiLU, f(x) = x * sigmoid(x).
template <typename S>
inline S sigmoid(S x) {
  if (x >= S(0)) {
    S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  S e = std::exp(x);
  return e / (S(1) + e);
}

template <typename S>
inline S silu(S x) {
  return x * sigmoid(x);
}

// f'(x) = s(x) * (1 + x * (1 - s(x)))
template <typename S>
inline S silu_grad(S x) {
  S s = sigmoid(x);
  return s * (S(1) + x * (S(1) - s));
}

template <typename S>
void activation_forward_span(const S* x, size_t n, S* y) {
  for (size_t i = 0; i < n; ++i) y[i] = silu(x[i]);
}

// dx[i] = up[i] * f'(x[i]); x is the pre-activation input
template <typename S>
void activation_backward_span(const S* x, const S* up, size_t n, S* dx) {
  for (size_t i = 0; i < n; ++i) dx[i] = up[i] * silu_grad(x[i]);
}

// out[seg,d] = sum of value rows with that segment id, ascending row order
template <typename S>
void segment_sum_span(const S* values, size_t rows, size_t d,
                      const int* segment_ids, size_t n_segments, S* out) {
  for (size_t i = 0; i < n_segments * d; ++i) out[i] = S(0);
  for (size_t r = 0; r < rows; ++r) {
    int s = segment_ids[r];
    require(s >= 0 && static_cast<size_t>(s) < n_segments,
            "segment_sum: segment id out of range");
    S* os = out + static_cast<size_t>(s) * d;
    const S* vr = values + r * d;
    for (size_t k = 0; k < d; ++k) os[k] += vr[k];
  }
}

// ---- Tensor-level wrappers ----

template <typename S>
TensorT<S> linear_forward(const TensorT<S>& x, const TensorT<S>& W,
                          const TensorT<S>& b) {
  require(x.rank() == 2 && W.rank() == 2 && b.rank() == 1 &&
              x.extent(1) == W.extent(0) && W.extent(1) == b.extent(0),
          "linear_forward: shape mismatch x" + x.shape_str() + " W" +
              W.shape_str() + " b" + b.shape_str());
  TensorT<S> y({x.extent(0), W.extent(1)});
  linear_forward_span(x.data(), x.extent(0), x.extent(1), W.data(),
                      W.extent(1), b.data(), y.data());
  return y;
}

template <typename S>
struct LayerGradT {
  TensorT<S> dW, db, dx;
};

template <typename S>
LayerGradT<S> linear_backward(const TensorT<S>& x, const TensorT<S>& W,
                              const TensorT<S>& up) {
  require(x.rank() == 2 && W.rank() == 2 && up.rank() == 2 &&
              x.extent(1) == W.extent(0) && up.extent(0) == x.extent(0) &&
              up.extent(1) == W.extent(1),
          "linear_backward: shape mismatch");
  LayerGradT<S> g;
  g.dW = TensorT<S>({W.extent(0), W.extent(1)});
  g.db = TensorT<S>({W.extent(1)});
  g.dx = TensorT<S>({x.extent(0), x.extent(1)});
  linear_backward_span(x.data(), x.extent(0), x.extent(1), W.data(),
                       W.extent(1), up.data(), g.dW.data(), g.db.data(),
                       g.dx.data());
  return g;
}

template <typename S>
TensorT<S> activation_forward(const TensorT<S>& x) {
  TensorT<S> y(x.shape());
  activation_forward_span(x.data(), x.size(), y.data());
  return y;
}

template <typename S>
TensorT<S> activation_backward(const TensorT<S>& x, const TensorT<S>& up) {
  require(x.same_shape(up), "activation_backward: shape mismatch");
  TensorT<S> dx(x.shape());
  activation_backward_span(x.data(), up.data(), x.size(), dx.data());
  return dx;
}

template <typename S>
TensorT<S> segment_sum(const TensorT<S>& values,
                       const std::vector<int>& segment_ids,
                       size_t n_segments) {
  require(values.rank() == 2 && segment_ids.size() == values.extent(0),
          "segment_sum: values must be [rows, d] with one id per row");
  TensorT<S> out({n_segments, values.extent(1)});
  segment_sum_span(values.data(), values.extent(0), values.extent(1),
                   segment_ids.data(), n_segments, out.data());
  return out;
}

}  // namespace hmtl::num
