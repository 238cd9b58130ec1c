#pragma once

// Brute-force double-precision transcriptions used as test oracles. They
// share no code with the library beyond the Tensor container.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "atup/tensor.hpp"

namespace oracle {

using atup::Tensor;
using T3 = Tensor<double>;

template <class U>
T3 to_double(const Tensor<U>& t) {
  return t.template cast<double>();
}

/// out[o,i,j] = sum_c sum_u sum_v w[o,c,u,v] * x[c, i+u-r, j+v-r], zero outside.
inline T3 conv2d(const T3& x, const T3& w) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), O = w.dim(0), K = w.dim(2);
  const long r = static_cast<long>(K - 1) / 2;
  T3 out({O, H, W});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t u = 0; u < K; ++u)
            for (std::size_t v = 0; v < K; ++v) {
              const long a = static_cast<long>(i) + static_cast<long>(u) - r;
              const long b = static_cast<long>(j) + static_cast<long>(v) - r;
              if (a < 0 || b < 0 || a >= static_cast<long>(H) || b >= static_cast<long>(W)) continue;
              s += w.at(o, c, u, v) * x(c, static_cast<std::size_t>(a), static_cast<std::size_t>(b));
            }
        out(o, i, j) = s;
      }
  return out;
}

inline T3 conv1x1(const T3& x, const T3& w) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), O = w.dim(0);
  T3 out({O, H, W});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < C; ++c) s += w(o, c) * x(c, i, j);
        out(o, i, j) = s;
      }
  return out;
}

inline T3 zero_upsample(const T3& x, std::size_t S) {
  T3 out({x.dim(0), x.dim(1) * S, x.dim(2) * S});
  for (std::size_t c = 0; c < out.dim(0); ++c)
    for (std::size_t i = 0; i < out.dim(1); ++i)
      for (std::size_t j = 0; j < out.dim(2); ++j)
        if (i % S == 0 && j % S == 0) out(c, i, j) = x(c, i / S, j / S);
  return out;
}

/// Output (i, j) samples input (i/S, j/S); the far neighbour clamps to the border.
inline T3 bilinear_upsample(const T3& x, std::size_t S) {
  const std::size_t H = x.dim(1), W = x.dim(2);
  T3 out({x.dim(0), H * S, W * S});
  for (std::size_t c = 0; c < x.dim(0); ++c)
    for (std::size_t i = 0; i < H * S; ++i)
      for (std::size_t j = 0; j < W * S; ++j) {
        const double yi = static_cast<double>(i) / static_cast<double>(S);
        const double xj = static_cast<double>(j) / static_cast<double>(S);
        const auto i0 = static_cast<std::size_t>(std::floor(yi)), j0 = static_cast<std::size_t>(std::floor(xj));
        const std::size_t i1 = std::min(i0 + 1, H - 1), j1 = std::min(j0 + 1, W - 1);
        const double fy = yi - static_cast<double>(i0), fx = xj - static_cast<double>(j0);
        out(c, i, j) = (1 - fy) * ((1 - fx) * x(c, i0, j0) + fx * x(c, i0, j1)) +
                       fy * ((1 - fx) * x(c, i1, j0) + fx * x(c, i1, j1));
      }
  return out;
}

/// Windowed attention over full-resolution Q, K, V maps. A neighbour (a, b)
/// of (i, j) takes part when it lies in the image and `valid(a, b)` holds.
/// Logit = scale * sum_c q_c (k_c + p_c) with p = pos_x[a-i+r] || pos_y[b-j+r].
inline T3 window_attention(const T3& q, const T3& k, const T3& v, const T3& pos_x, const T3& pos_y, int K,
                           double scale, const std::function<bool(long, long)>& valid) {
  const std::size_t C = q.dim(0), H = q.dim(1), W = q.dim(2), Cv = v.dim(0), half = C / 2;
  const long r = (K - 1) / 2;
  T3 out({Cv, H, W});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      std::vector<double> logits;
      std::vector<std::pair<std::size_t, std::size_t>> where;
      for (long dx = -r; dx <= r; ++dx)
        for (long dy = -r; dy <= r; ++dy) {
          const long a = static_cast<long>(i) + dx, b = static_cast<long>(j) + dy;
          if (a < 0 || b < 0 || a >= static_cast<long>(H) || b >= static_cast<long>(W) || !valid(a, b)) continue;
          double l = 0;
          for (std::size_t c = 0; c < C; ++c) {
            const double p = c < half ? pos_x(static_cast<std::size_t>(dx + r), c)
                                      : pos_y(static_cast<std::size_t>(dy + r), c - half);
            l += q(c, i, j) * (k(c, static_cast<std::size_t>(a), static_cast<std::size_t>(b)) + p);
          }
          logits.push_back(scale * l);
          where.emplace_back(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
        }
      double mx = -INFINITY;
      for (double l : logits) mx = std::max(mx, l);
      double z = 0;
      for (double& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t c = 0; c < Cv; ++c) {
        double s = 0;
        for (std::size_t n = 0; n < logits.size(); ++n) s += logits[n] / z * v(c, where[n].first, where[n].second);
        out(c, i, j) = s;
      }
    }
  return out;
}

/// Masked attention upsampling of X by S with projections w_q, w_k, w_v.
inline T3 attention_upsample(const T3& x, const T3& w_q, const T3& w_k, const T3& w_v, const T3& pos_x,
                             const T3& pos_y, int K, std::size_t S, bool scale_logits) {
  const auto q = bilinear_upsample(conv1x1(x, w_q), S);
  const auto k = zero_upsample(conv1x1(x, w_k), S);
  const auto v = zero_upsample(conv1x1(x, w_v), S);
  const double scale = scale_logits ? 1.0 / std::sqrt(static_cast<double>(w_q.dim(0))) : 1.0;
  const long s = static_cast<long>(S);
  return window_attention(q, k, v, pos_x, pos_y, K, scale, [s](long a, long b) { return a % s == 0 && b % s == 0; });
}

/// Query and key from the HR guide, value from the zero-upsampled target.
inline T3 attention_joint_upsample(const T3& x_lr, const T3& x_hr, const T3& w_q, const T3& w_k, const T3& w_v,
                                   const T3& pos_x, const T3& pos_y, int K, std::size_t S, bool scale_logits) {
  const auto q = conv1x1(x_hr, w_q);
  const auto k = conv1x1(x_hr, w_k);
  const auto v = zero_upsample(conv1x1(x_lr, w_v), S);
  const double scale = scale_logits ? 1.0 / std::sqrt(static_cast<double>(w_q.dim(0))) : 1.0;
  const long s = static_cast<long>(S);
  return window_attention(q, k, v, pos_x, pos_y, K, scale, [s](long a, long b) { return a % s == 0 && b % s == 0; });
}

inline T3 relu(T3 x) {
  for (auto& v : x.data()) v = std::max(v, 0.0);
  return x;
}

inline T3 avg_pool(const T3& x, std::size_t f) {
  T3 out({x.dim(0), x.dim(1) / f, x.dim(2) / f});
  for (std::size_t c = 0; c < out.dim(0); ++c)
    for (std::size_t i = 0; i < out.dim(1); ++i)
      for (std::size_t j = 0; j < out.dim(2); ++j) {
        double s = 0;
        for (std::size_t u = 0; u < f; ++u)
          for (std::size_t v = 0; v < f; ++v) s += x(c, i * f + u, j * f + v);
        out(c, i, j) = s / static_cast<double>(f * f);
      }
  return out;
}

inline T3 channels(const T3& x, std::size_t begin, std::size_t end) {
  T3 out({end - begin, x.dim(1), x.dim(2)});
  for (std::size_t c = begin; c < end; ++c)
    for (std::size_t i = 0; i < x.dim(1); ++i)
      for (std::size_t j = 0; j < x.dim(2); ++j) out(c - begin, i, j) = x(c, i, j);
  return out;
}

inline T3 stack(const T3& a, const T3& b) {
  T3 out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  for (std::size_t c = 0; c < out.dim(0); ++c)
    for (std::size_t i = 0; i < a.dim(1); ++i)
      for (std::size_t j = 0; j < a.dim(2); ++j) out(c, i, j) = c < a.dim(0) ? a(c, i, j) : b(c - a.dim(0), i, j);
  return out;
}

/// Keys cubic kernel with a = -0.5.
inline double keys(double x) {
  x = std::abs(x);
  if (x < 1) return 1.5 * x * x * x - 2.5 * x * x + 1;
  if (x < 2) return -0.5 * x * x * x + 2.5 * x * x - 4 * x + 2;
  return 0;
}

}  // namespace oracle
