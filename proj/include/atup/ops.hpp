#pragma once

// Dense primitives shared by every other module: direct convolution, 1x1
// projection, masked softmax, and their adjoints.

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "atup/tensor.hpp"

namespace atup {

namespace detail {

/// Eight-lane dot product. Fixed summation order, vectorizes without -ffast-math.
template <class T>
inline T dot_lanes(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8)
    for (int l = 0; l < 8; ++l) acc[l] += a[k + l] * b[k + l];
  T tail = 0;
  for (; k < n; ++k) tail += a[k] * b[k];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

inline void require_rank(const Shape& s, std::size_t r, std::string_view what) {
  if (s.size() != r)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                     to_string(s));
}

struct Span1 {
  std::ptrdiff_t lo, hi;  // output index range [lo, hi) whose tap stays inside the input
};

inline Span1 valid_range(std::ptrdiff_t out_len, std::ptrdiff_t in_len, std::ptrdiff_t shift) {
  return {std::max<std::ptrdiff_t>(0, -shift), std::min(out_len, in_len - shift)};
}

}  // namespace detail

/// Stride-1 cross-correlation with zero padding.
/// X: C_in x H x W, W: C_out x C_in x K x K, output C_out x (H+2p-K+1) x (W+2p-K+1).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int padding, MacCounter* counter = nullptr) {
  detail::require_rank(x.shape(), 3, "conv2d input");
  detail::require_rank(w.shape(), 4, "conv2d kernel");
  const std::size_t cin = x.dim(0), cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin)
    throw ShapeError("conv2d: kernel expects " + std::to_string(w.dim(1)) + " input channels, got " +
                     std::to_string(cin));
  if (w.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square with odd size");
  if (padding < 0) throw ParamError("conv2d: negative padding");
  const auto H = static_cast<std::ptrdiff_t>(x.dim(1)), W = static_cast<std::ptrdiff_t>(x.dim(2));
  const std::ptrdiff_t OH = H + 2 * padding - static_cast<std::ptrdiff_t>(k) + 1;
  const std::ptrdiff_t OW = W + 2 * padding - static_cast<std::ptrdiff_t>(k) + 1;
  if (OH < 1 || OW < 1) throw ShapeError("conv2d: kernel larger than padded input");

  Tensor<T> out({cout, static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
  for (std::size_t co = 0; co < cout; ++co) {
    T* o = out.ptr() + co * OH * OW;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* xp = x.ptr() + ci * H * W;
      const T* wp = w.ptr() + (co * cin + ci) * k * k;
      for (std::size_t kh = 0; kh < k; ++kh) {
        const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(kh) - padding;
        const auto ri = detail::valid_range(OH, H, di);
        for (std::size_t kw = 0; kw < k; ++kw) {
          const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(kw) - padding;
          const auto rj = detail::valid_range(OW, W, dj);
          const T wv = wp[kh * k + kw];
          if (rj.hi <= rj.lo) continue;
          for (std::ptrdiff_t i = ri.lo; i < ri.hi; ++i) {
            T* orow = o + i * OW;
            const T* xrow = xp + (i + di) * W + dj;
            for (std::ptrdiff_t j = rj.lo; j < rj.hi; ++j) orow[j] += wv * xrow[j];
          }
          if (counter && ri.hi > ri.lo)
            counter->add(static_cast<std::uint64_t>((ri.hi - ri.lo) * (rj.hi - rj.lo)));
        }
      }
    }
  }
  return out;
}

/// Adjoint of conv2d with respect to its input: accumulates into dx.
template <class T>
void conv2d_backward_input(const Tensor<T>& dy, const Tensor<T>& w, int padding, Tensor<T>& dx) {
  const std::size_t cin = w.dim(1), cout = w.dim(0), k = w.dim(2);
  const auto H = static_cast<std::ptrdiff_t>(dx.dim(1)), W = static_cast<std::ptrdiff_t>(dx.dim(2));
  const auto OH = static_cast<std::ptrdiff_t>(dy.dim(1)), OW = static_cast<std::ptrdiff_t>(dy.dim(2));
  for (std::size_t ci = 0; ci < cin; ++ci) {
    T* xg = dx.ptr() + ci * H * W;
    for (std::size_t co = 0; co < cout; ++co) {
      const T* g = dy.ptr() + co * OH * OW;
      const T* wp = w.ptr() + (co * cin + ci) * k * k;
      for (std::size_t kh = 0; kh < k; ++kh) {
        const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(kh) - padding;
        const auto ri = detail::valid_range(OH, H, di);
        for (std::size_t kw = 0; kw < k; ++kw) {
          const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(kw) - padding;
          const auto rj = detail::valid_range(OW, W, dj);
          const T wv = wp[kh * k + kw];
          for (std::ptrdiff_t i = ri.lo; i < ri.hi; ++i) {
            const T* grow = g + i * OW;
            T* xrow = xg + (i + di) * W + dj;
            for (std::ptrdiff_t j = rj.lo; j < rj.hi; ++j) xrow[j] += wv * grow[j];
          }
        }
      }
    }
  }
}

/// Adjoint of conv2d with respect to its kernel: accumulates into dw.
template <class T>
void conv2d_backward_weight(const Tensor<T>& dy, const Tensor<T>& x, int padding, Tensor<T>& dw) {
  const std::size_t cin = dw.dim(1), cout = dw.dim(0), k = dw.dim(2);
  const auto H = static_cast<std::ptrdiff_t>(x.dim(1)), W = static_cast<std::ptrdiff_t>(x.dim(2));
  const auto OH = static_cast<std::ptrdiff_t>(dy.dim(1)), OW = static_cast<std::ptrdiff_t>(dy.dim(2));
  for (std::size_t co = 0; co < cout; ++co) {
    const T* g = dy.ptr() + co * OH * OW;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* xp = x.ptr() + ci * H * W;
      T* wg = dw.ptr() + (co * cin + ci) * k * k;
      for (std::size_t kh = 0; kh < k; ++kh) {
        const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(kh) - padding;
        const auto ri = detail::valid_range(OH, H, di);
        for (std::size_t kw = 0; kw < k; ++kw) {
          const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(kw) - padding;
          const auto rj = detail::valid_range(OW, W, dj);
          if (rj.hi <= rj.lo) continue;
          T acc = 0;
          for (std::ptrdiff_t i = ri.lo; i < ri.hi; ++i)
            acc += detail::dot_lanes(g + i * OW + rj.lo, xp + (i + di) * W + dj + rj.lo,
                                     static_cast<std::size_t>(rj.hi - rj.lo));
          wg[kh * k + kw] += acc;
        }
      }
    }
  }
}

/// Per-pixel linear map: out[o,i,j] = sum_c W[o,c] X[c,i,j]. No bias.
template <class T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& w, MacCounter* counter = nullptr) {
  detail::require_rank(x.shape(), 3, "conv1x1 input");
  detail::require_rank(w.shape(), 2, "conv1x1 weight");
  const std::size_t cin = x.dim(0), cout = w.dim(0), n = x.dim(1) * x.dim(2);
  if (w.dim(1) != cin)
    throw ShapeError("conv1x1: weight expects " + std::to_string(w.dim(1)) + " input channels, got " +
                     std::to_string(cin));
  Tensor<T> out({cout, x.dim(1), x.dim(2)});
  for (std::size_t o = 0; o < cout; ++o) {
    T* op = out.ptr() + o * n;
    for (std::size_t c = 0; c < cin; ++c) {
      const T wv = w(o, c);
      const T* xp = x.ptr() + c * n;
      for (std::size_t p = 0; p < n; ++p) op[p] += wv * xp[p];
    }
  }
  count(counter, cin * cout * n);
  return out;
}

template <class T>
void conv1x1_backward_input(const Tensor<T>& dy, const Tensor<T>& w, Tensor<T>& dx) {
  const std::size_t cin = w.dim(1), cout = w.dim(0), n = dx.dim(1) * dx.dim(2);
  for (std::size_t c = 0; c < cin; ++c) {
    T* xg = dx.ptr() + c * n;
    for (std::size_t o = 0; o < cout; ++o) {
      const T wv = w(o, c);
      const T* g = dy.ptr() + o * n;
      for (std::size_t p = 0; p < n; ++p) xg[p] += wv * g[p];
    }
  }
}

template <class T>
void conv1x1_backward_weight(const Tensor<T>& dy, const Tensor<T>& x, Tensor<T>& dw) {
  const std::size_t cin = dw.dim(1), cout = dw.dim(0), n = x.dim(1) * x.dim(2);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t c = 0; c < cin; ++c)
      dw(o, c) += detail::dot_lanes(dy.ptr() + o * n, x.ptr() + c * n, n);
}

/// Softmax over the entries whose mask is 0; entries masked with -inf get
/// exactly 0. Stabilized by the largest unmasked logit.
template <class T>
std::vector<T> softmax_masked(std::span<const T> logits, std::span<const T> mask) {
  if (logits.size() != mask.size()) throw ShapeError("softmax_masked: logits/mask length differ");
  T peak = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask[i] == -std::numeric_limits<T>::infinity()) continue;
    any = true;
    peak = std::max(peak, logits[i] + mask[i]);
  }
  if (!any) throw EmptyWindowError("softmax_masked");
  std::vector<T> out(logits.size(), T{0});
  T z = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (mask[i] == -std::numeric_limits<T>::infinity()) continue;
    out[i] = std::exp(logits[i] + mask[i] - peak);
    z += out[i];
  }
  for (auto& v : out) v /= z;
  return out;
}

/// Vector-Jacobian product of the softmax given its normalized output.
template <class T>
std::vector<T> softmax_backward(std::span<const T> probs, std::span<const T> grad_out) {
  T mean = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) mean += probs[i] * grad_out[i];
  std::vector<T> g(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) g[i] = probs[i] * (grad_out[i] - mean);
  return g;
}

}  // namespace atup
