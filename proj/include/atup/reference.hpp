#pragma once

// Loop-level transcriptions of the attention and transposed-convolution
// operators. These are slow on purpose: they materialize the zero-upsampled
// key/value maps and the -inf mask and walk every K x K window literally.
// Everything else in the library is checked against them.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "atup/ops.hpp"
#include "atup/tensor.hpp"

namespace atup {

/// Learnable state of one attention upsampling layer.
///
/// W_Q and W_K map the query/key source channels to C_out; W_V maps the value
/// source channels to C_out. For the single-input layer all three read the
/// same C_in channels; for the joint layer W_Q/W_K read the guide and W_V the
/// target. pos_x is indexed by the row offset (a - i), pos_y by the column
/// offset (b - j); row index of either table is offset + (K-1)/2.
template <class T>
struct AttnUpsampleParams {
  Tensor<T> w_q, w_k, w_v;  // C_out x C_src
  Tensor<T> pos_x, pos_y;   // K x C_out/2
  int kernel_size = 3;
  int stride = 2;
  bool scale_logits = true;

  std::size_t c_out() const { return w_q.dim(0); }
  int radius() const { return (kernel_size - 1) / 2; }
  T logit_scale() const {
    return scale_logits ? static_cast<T>(1.0 / std::sqrt(static_cast<double>(c_out()))) : T{1};
  }

  /// Throws if the layer cannot be evaluated. `check_window` adds K >= 2S-1.
  void validate(bool check_window = true) const {
    if (kernel_size < 1 || kernel_size % 2 == 0) throw ParamError("attention kernel size must be odd");
    if (stride < 1) throw ParamError("attention stride must be >= 1");
    const std::size_t c = w_q.dim(0);
    if (c % 2 != 0) throw ParamError("attention C_out must be even, got " + std::to_string(c));
    if (w_k.dim(0) != c || w_v.dim(0) != c) throw ShapeError("attention projections disagree on C_out");
    if (w_q.dim(1) != w_k.dim(1)) throw ShapeError("W_Q and W_K must read the same source");
    const Shape pos{static_cast<std::size_t>(kernel_size), c / 2};
    if (pos_x.shape() != pos || pos_y.shape() != pos)
      throw ShapeError("positional tables must be " + to_string(pos));
    if (check_window && kernel_size < 2 * stride - 1)
      throw EmptyWindowError("kernel size " + std::to_string(kernel_size) + " < 2*stride-1 = " +
                             std::to_string(2 * stride - 1));
  }

  /// Fan-in uniform projections; positional tables uniform in +-1/sqrt(C_out).
  static AttnUpsampleParams init(std::size_t c_qk_src, std::size_t c_v_src, std::size_t c_out, int k,
                                 int s, Rng& rng, bool scale = true) {
    if (c_out % 2 != 0) throw ParamError("attention C_out must be even, got " + std::to_string(c_out));
    AttnUpsampleParams p;
    const double bq = 1.0 / std::sqrt(static_cast<double>(c_qk_src));
    const double bv = 1.0 / std::sqrt(static_cast<double>(c_v_src));
    const double bp = 1.0 / std::sqrt(static_cast<double>(c_out));
    p.w_q = uniform_tensor<T>({c_out, c_qk_src}, -bq, bq, rng);
    p.w_k = uniform_tensor<T>({c_out, c_qk_src}, -bq, bq, rng);
    p.w_v = uniform_tensor<T>({c_out, c_v_src}, -bv, bv, rng);
    p.pos_x = uniform_tensor<T>({static_cast<std::size_t>(k), c_out / 2}, -bp, bp, rng);
    p.pos_y = uniform_tensor<T>({static_cast<std::size_t>(k), c_out / 2}, -bp, bp, rng);
    p.kernel_size = k;
    p.stride = s;
    p.scale_logits = scale;
    return p;
  }

  static AttnUpsampleParams init(std::size_t c_in, std::size_t c_out, int k, int s, Rng& rng,
                                 bool scale = true) {
    return init(c_in, c_in, c_out, k, s, rng, scale);
  }

  std::size_t num_params() const {
    return w_q.size() + w_k.size() + w_v.size() + pos_x.size() + pos_y.size();
  }

  template <class U>
  AttnUpsampleParams<U> cast() const {
    return {w_q.template cast<U>(), w_k.template cast<U>(), w_v.template cast<U>(),
            pos_x.template cast<U>(), pos_y.template cast<U>(), kernel_size, stride, scale_logits};
  }
};

/// Validity map of the zero-upsampled grid: 0 on kept samples, -inf elsewhere.
template <class T>
struct Mask {
  Tensor<T> grid;  // (S*H) x (S*W)
  int stride = 1;

  bool valid(std::size_t a, std::size_t b) const { return grid(a, b) == T{0}; }
};

template <class T>
struct DeconvParams {
  Tensor<T> w;  // C_out x C_in x K x K
  int stride = 2;
  int kernel_size = 3;

  static DeconvParams init(std::size_t c_in, std::size_t c_out, int k, int s, Rng& rng) {
    if (k < 1 || k % 2 == 0) throw ParamError("deconvolution kernel size must be odd");
    const double b = 1.0 / std::sqrt(static_cast<double>(c_in * k * k));
    const auto ku = static_cast<std::size_t>(k);
    return {uniform_tensor<T>({c_out, c_in, ku, ku}, -b, b, rng), s, k};
  }

  std::size_t num_params() const { return w.size(); }
};

// ---------------------------------------------------------------------------
// Resampling

/// Inserts S-1 zeros after every sample in both spatial axes.
template <class T>
Tensor<T> zero_upsample(const Tensor<T>& x, int s) {
  if (s < 1) throw ParamError("zero_upsample: stride must be >= 1");
  detail::require_rank(x.shape(), 3, "zero_upsample");
  const std::size_t S = static_cast<std::size_t>(s), C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor<T> out({C, S * H, S * W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < S * H; ++i)
      for (std::size_t j = 0; j < S * W; ++j)
        if (i % S == 0 && j % S == 0) out(c, i, j) = x(c, i / S, j / S);
  return out;
}

/// Keeps the samples at (S*i, S*j). Adjoint of zero_upsample.
template <class T>
Tensor<T> grid_pick(const Tensor<T>& x, int s) {
  if (s < 1) throw ParamError("grid_pick: stride must be >= 1");
  detail::require_rank(x.shape(), 3, "grid_pick");
  const std::size_t S = static_cast<std::size_t>(s), C = x.dim(0);
  if (x.dim(1) % S || x.dim(2) % S)
    throw ShapeError("grid_pick: " + to_string(x.shape()) + " not divisible by " + std::to_string(s));
  const std::size_t H = x.dim(1) / S, W = x.dim(2) / S;
  Tensor<T> out({C, H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) out(c, i, j) = x(c, S * i, S * j);
  return out;
}

namespace detail {

/// Bilinear source taps for output coordinate o at stride S: samples
/// input coordinate o/S, clamped at the last sample.
struct LerpTap {
  std::size_t lo, hi;
  double frac;
};

inline LerpTap lerp_tap(std::size_t o, std::size_t s, std::size_t n) {
  const std::size_t lo = std::min(o / s, n - 1);
  const std::size_t hi = std::min(lo + 1, n - 1);
  const double frac = (o / s >= n - 1) ? 0.0 : static_cast<double>(o % s) / static_cast<double>(s);
  return {lo, hi, frac};
}

}  // namespace detail

/// Output (i, j) samples input coordinate (i/S, j/S); coordinates past the
/// last sample clamp to it. out[c, S*i, S*j] == x[c, i, j] exactly.
template <class T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int s, MacCounter* counter = nullptr) {
  if (s < 1) throw ParamError("bilinear_upsample: stride must be >= 1");
  detail::require_rank(x.shape(), 3, "bilinear_upsample");
  if (s == 1) return x;
  const std::size_t S = static_cast<std::size_t>(s), C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor<T> out({C, S * H, S * W});
  for (std::size_t i = 0; i < S * H; ++i) {
    const auto ty = detail::lerp_tap(i, S, H);
    const T wy1 = static_cast<T>(ty.frac), wy0 = T{1} - wy1;
    for (std::size_t j = 0; j < S * W; ++j) {
      const auto tx = detail::lerp_tap(j, S, W);
      const T wx1 = static_cast<T>(tx.frac), wx0 = T{1} - wx1;
      for (std::size_t c = 0; c < C; ++c) {
        out(c, i, j) = wy0 * (wx0 * x(c, ty.lo, tx.lo) + wx1 * x(c, ty.lo, tx.hi)) +
                       wy1 * (wx0 * x(c, ty.hi, tx.lo) + wx1 * x(c, ty.hi, tx.hi));
      }
    }
  }
  count(counter, 4 * C * S * H * S * W);
  return out;
}

/// Transpose of bilinear_upsample: accumulates into dx (C x H x W).
template <class T>
void bilinear_upsample_backward(const Tensor<T>& dy, int s, Tensor<T>& dx) {
  if (s == 1) {
    axpy(T{1}, dy, dx);
    return;
  }
  const std::size_t S = static_cast<std::size_t>(s), C = dx.dim(0), H = dx.dim(1), W = dx.dim(2);
  for (std::size_t i = 0; i < S * H; ++i) {
    const auto ty = detail::lerp_tap(i, S, H);
    const T wy1 = static_cast<T>(ty.frac), wy0 = T{1} - wy1;
    for (std::size_t j = 0; j < S * W; ++j) {
      const auto tx = detail::lerp_tap(j, S, W);
      const T wx1 = static_cast<T>(tx.frac), wx0 = T{1} - wx1;
      for (std::size_t c = 0; c < C; ++c) {
        const T g = dy(c, i, j);
        dx(c, ty.lo, tx.lo) += wy0 * wx0 * g;
        dx(c, ty.lo, tx.hi) += wy0 * wx1 * g;
        dx(c, ty.hi, tx.lo) += wy1 * wx0 * g;
        dx(c, ty.hi, tx.hi) += wy1 * wx1 * g;
      }
    }
  }
}

template <class T>
Mask<T> make_mask(std::size_t h, std::size_t w, int s) {
  if (s < 1) throw ParamError("make_mask: stride must be >= 1");
  const std::size_t S = static_cast<std::size_t>(s);
  Mask<T> m{Tensor<T>({S * h, S * w}, -std::numeric_limits<T>::infinity()), s};
  for (std::size_t i = 0; i < S * h; i += S)
    for (std::size_t j = 0; j < S * w; j += S) m.grid(i, j) = T{0};
  return m;
}

// ---------------------------------------------------------------------------
// Transposed convolution

/// Zero-upsample then stride-1 convolution with padding (K-1)/2.
/// The counter, when given, receives the multiply-adds whose input tap lands
/// on a kept (non-inserted) sample.
template <class T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const DeconvParams<T>& p, MacCounter* counter = nullptr) {
  const int k = static_cast<int>(p.w.dim(2));
  if (k % 2 == 0) throw ParamError("transposed_conv2d: kernel size must be odd");
  Tensor<T> up = zero_upsample(x, p.stride);
  Tensor<T> out = conv2d(up, p.w, (k - 1) / 2);
  if (counter) {
    const auto S = static_cast<std::ptrdiff_t>(p.stride), r = static_cast<std::ptrdiff_t>((k - 1) / 2);
    const auto OH = static_cast<std::ptrdiff_t>(up.dim(1)), OW = static_cast<std::ptrdiff_t>(up.dim(2));
    std::uint64_t taps = 0;
    for (std::ptrdiff_t i = 0; i < OH; ++i)
      for (std::ptrdiff_t j = 0; j < OW; ++j)
        for (std::ptrdiff_t a = i - r; a <= i + r; ++a)
          for (std::ptrdiff_t b = j - r; b <= j + r; ++b)
            if (a >= 0 && a < OH && b >= 0 && b < OW && a % S == 0 && b % S == 0) ++taps;
    counter->add(taps * p.w.dim(0) * p.w.dim(1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

/// Y = softmax(Q K^T / sqrt(F_K)) V, softmax over each row.
template <class T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  detail::require_rank(q.shape(), 2, "attention Q");
  detail::require_rank(k.shape(), 2, "attention K");
  detail::require_rank(v.shape(), 2, "attention V");
  const std::size_t n = q.dim(0), fk = q.dim(1), fv = v.dim(1);
  if (k.dim(0) != n || v.dim(0) != n || k.dim(1) != fk) throw ShapeError("attention: Q/K/V disagree");
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(fk)));
  Tensor<T> y({n, fv});
  std::vector<T> logits(n), zeros(n, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T a = 0;
      for (std::size_t f = 0; f < fk; ++f) a += q(i, f) * k(j, f);
      logits[j] = a * scale;
    }
    const auto w = softmax_masked<T>(logits, zeros);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t f = 0; f < fv; ++f) y(i, f) += w[j] * v(j, f);
  }
  return y;
}

/// q^T (k + (pos_x[dx] || pos_y[dy])), scaled by 1/sqrt(F) when enabled.
template <class T>
T relative_logit(std::span<const T> q, std::span<const T> k, int dx, int dy, const AttnUpsampleParams<T>& p) {
  const int r = p.radius();
  if (std::abs(dx) > r || std::abs(dy) > r)
    throw ParamError("relative_logit: offset (" + std::to_string(dx) + "," + std::to_string(dy) +
                     ") outside radius " + std::to_string(r));
  const std::size_t f = q.size(), half = f / 2;
  if (k.size() != f || p.pos_x.dim(1) != half) throw ShapeError("relative_logit: vector length mismatch");
  const auto rx = static_cast<std::size_t>(dx + r), ry = static_cast<std::size_t>(dy + r);
  T acc = 0;
  for (std::size_t c = 0; c < half; ++c) acc += q[c] * (k[c] + p.pos_x(rx, c));
  for (std::size_t c = 0; c < half; ++c) acc += q[half + c] * (k[half + c] + p.pos_y(ry, c));
  return acc * p.logit_scale();
}

namespace detail {

template <class T>
std::vector<T> channel_vector(const Tensor<T>& t, std::size_t i, std::size_t j) {
  std::vector<T> v(t.dim(0));
  for (std::size_t c = 0; c < v.size(); ++c) v[c] = t(c, i, j);
  return v;
}

/// Windowed attention over Q_up/K_up/V_up (all C x OH x OW) with an optional
/// mask. Out-of-image neighbors are dropped from the window.
template <class T>
Tensor<T> windowed_attention(const Tensor<T>& q_up, const Tensor<T>& k_up, const Tensor<T>& v_up,
                             const Mask<T>* mask, const AttnUpsampleParams<T>& p, MacCounter* counter) {
  const std::size_t C = q_up.dim(0), OH = q_up.dim(1), OW = q_up.dim(2);
  const int r = p.radius();
  Tensor<T> out({v_up.dim(0), OH, OW});
  std::vector<T> logits, mvals;
  std::vector<std::pair<std::size_t, std::size_t>> where;
  for (std::size_t i = 0; i < OH; ++i) {
    for (std::size_t j = 0; j < OW; ++j) {
      logits.clear();
      mvals.clear();
      where.clear();
      const auto q = channel_vector(q_up, i, j);
      for (int dx = -r; dx <= r; ++dx) {
        const std::ptrdiff_t a = static_cast<std::ptrdiff_t>(i) + dx;
        if (a < 0 || a >= static_cast<std::ptrdiff_t>(OH)) continue;
        for (int dy = -r; dy <= r; ++dy) {
          const std::ptrdiff_t b = static_cast<std::ptrdiff_t>(j) + dy;
          if (b < 0 || b >= static_cast<std::ptrdiff_t>(OW)) continue;
          const T m = mask ? mask->grid(a, b) : T{0};
          where.emplace_back(a, b);
          mvals.push_back(m);
          if (m == -std::numeric_limits<T>::infinity()) {
            logits.push_back(m);  // never evaluated: the softmax discards it
            continue;
          }
          const auto k = channel_vector(k_up, a, b);
          logits.push_back(relative_logit<T>(q, k, dx, dy, p) + m);
          count(counter, C);
        }
      }
      const auto w = softmax_masked<T>(logits, mvals);
      for (std::size_t n = 0; n < where.size(); ++n) {
        if (mvals[n] != T{0}) continue;
        for (std::size_t c = 0; c < out.dim(0); ++c)
          out(c, i, j) += w[n] * v_up(c, where[n].first, where[n].second);
        count(counter, out.dim(0));
      }
    }
  }
  return out;
}

}  // namespace detail

/// Local self-attention convolution over each K x K neighborhood.
template <class T>
Tensor<T> attention_conv(const Tensor<T>& x, const AttnUpsampleParams<T>& p, MacCounter* counter = nullptr) {
  p.validate(false);
  const Tensor<T> q = conv1x1(x, p.w_q, counter);
  const Tensor<T> k = conv1x1(x, p.w_k, counter);
  const Tensor<T> v = conv1x1(x, p.w_v, counter);
  return detail::windowed_attention<T>(q, k, v, nullptr, p, counter);
}

/// Masked attention upsampling by p.stride.
template <class T>
Tensor<T> attention_upsample(const Tensor<T>& x, const AttnUpsampleParams<T>& p, MacCounter* counter = nullptr) {
  p.validate();
  detail::require_rank(x.shape(), 3, "attention_upsample input");
  const int S = p.stride;
  const Tensor<T> q = conv1x1(x, p.w_q, counter);
  const Tensor<T> k = conv1x1(x, p.w_k, counter);
  const Tensor<T> v = conv1x1(x, p.w_v, counter);
  const Tensor<T> q_up = bilinear_upsample(q, S, counter);
  const Tensor<T> k_up = zero_upsample(k, S);
  const Tensor<T> v_up = zero_upsample(v, S);
  const Mask<T> m = make_mask<T>(x.dim(1), x.dim(2), S);
  return detail::windowed_attention<T>(q_up, k_up, v_up, &m, p, counter);
}

/// Guided variant: queries and keys from the high-resolution guide, values
/// from the low-resolution target.
template <class T>
Tensor<T> attention_joint_upsample(const Tensor<T>& x_lr, const Tensor<T>& x_hr, const AttnUpsampleParams<T>& p,
                                   MacCounter* counter = nullptr) {
  p.validate();
  detail::require_rank(x_lr.shape(), 3, "joint target");
  detail::require_rank(x_hr.shape(), 3, "joint guide");
  const auto S = static_cast<std::size_t>(p.stride);
  if (x_hr.dim(1) != S * x_lr.dim(1) || x_hr.dim(2) != S * x_lr.dim(2))
    throw ShapeError("joint upsample: guide " + to_string(x_hr.shape()) + " is not " + std::to_string(S) +
                     "x target " + to_string(x_lr.shape()));
  const Tensor<T> q_up = conv1x1(x_hr, p.w_q, counter);
  const Tensor<T> k_up = conv1x1(x_hr, p.w_k, counter);
  const Tensor<T> v_up = zero_upsample(conv1x1(x_lr, p.w_v, counter), p.stride);
  const Mask<T> m = make_mask<T>(x_lr.dim(1), x_lr.dim(2), p.stride);
  return detail::windowed_attention<T>(q_up, k_up, v_up, &m, p, counter);
}

// ---------------------------------------------------------------------------
// Parameter counts (bias-free)

inline std::uint64_t count_params_deconv(std::uint64_t c_in, std::uint64_t c_out, std::uint64_t k) {
  if (!c_in || !c_out || !k) throw ParamError("count_params_deconv: arguments must be positive");
  return c_in * c_out * k * k;
}

/// Three 1x1 projections plus K rows of C_out/2 per axis.
inline std::uint64_t count_params_attention(std::uint64_t c_in, std::uint64_t c_out, std::uint64_t k) {
  if (!c_in || !c_out || !k) throw ParamError("count_params_attention: arguments must be positive");
  if (c_out % 2) throw ParamError("count_params_attention: C_out must be even");
  return 3 * c_in * c_out + k * c_out;
}

}  // namespace atup
