#pragma once

// Mask-aware kernels for attention upsampling and transposed convolution.
//
// Under the periodic mask, the valid neighbors of output pixel (i, j) depend
// only on its phase (i mod S, j mod S): they are the low-resolution samples
// (i/S + t_r, j/S + t_c) for a fixed per-phase list of offsets t. The kernels
// gather straight from the low-resolution maps through that list, so neither
// the zero-upsampled keys/values nor the mask is ever built, and the
// (S^2-1)/S^2 masked fraction of each window costs nothing.
//
// Internally everything is pixel-major (channels innermost). Each output
// pixel is reduced in a fixed order (row offset, then column offset, then
// channel), so results do not depend on the thread count.
//
// Multiply-add accounting (flops_* below):
//   projections       3 * C_in * C_out per low-resolution pixel
//   query upsampling  4 * C_out per output pixel when S > 1
//   per valid pair    C_out for the logit, C_out for the weighted sum
//   transposed conv   C_in * C_out per valid pair
// where "valid pair" is an (output pixel, in-image kept input sample) pair
// inside the K x K window. The count of valid pairs factorizes into a row
// sum times a column sum (valid_pairs_axis).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <thread>
#include <vector>

#include "atup/ops.hpp"
#include "atup/reference.hpp"
#include "atup/tensor.hpp"

namespace atup {

inline int& default_threads() {
  static int n = 1;
  return n;
}

inline void set_threads(int n) { default_threads() = std::max(1, n); }

/// Splits [0, n) into contiguous chunks, one per thread; fn(begin, end).
template <class F>
void parallel_for(std::size_t n, int threads, F&& fn) {
  const std::size_t t = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, threads)), n);
  if (t <= 1) {
    if (n) fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(t - 1);
  const std::size_t chunk = (n + t - 1) / t;
  for (std::size_t w = 1; w < t; ++w) {
    const std::size_t b = w * chunk, e = std::min(n, b + chunk);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
}

/// Valid neighbor offsets for every output phase.
struct PhasePlan {
  struct AxisTap {
    int lr_offset;  // t: low-resolution index = output_index / S + t
    int rel;        // S*t - phase: offset inside the K x K window
  };
  struct Tap {
    int dx, dy;          // window offsets (row, column)
    int du, dv;          // low-resolution offsets
    std::ptrdiff_t flat; // du * W_lr + dv
  };

  int stride = 1;
  int kernel = 1;
  std::vector<std::vector<AxisTap>> axis;  // [phase] -> taps along one axis
  std::vector<std::vector<Tap>> phases;    // [pi * S + pj] -> 2-D taps, row offset major

  static PhasePlan build(int s, int k, std::size_t w_lr = 0) {
    if (s < 1) throw ParamError("phase plan: stride must be >= 1");
    if (k < 1 || k % 2 == 0) throw ParamError("phase plan: kernel size must be odd");
    PhasePlan plan;
    plan.stride = s;
    plan.kernel = k;
    const int r = (k - 1) / 2;
    plan.axis.resize(static_cast<std::size_t>(s));
    for (int p = 0; p < s; ++p)
      for (int rel = -r; rel <= r; ++rel)
        if ((p + rel) % s == 0)  // lands on a kept sample
          plan.axis[static_cast<std::size_t>(p)].push_back({(p + rel) / s, rel});
    plan.phases.resize(static_cast<std::size_t>(s * s));
    for (int pi = 0; pi < s; ++pi)
      for (int pj = 0; pj < s; ++pj)
        for (const auto& a : plan.axis[static_cast<std::size_t>(pi)])
          for (const auto& b : plan.axis[static_cast<std::size_t>(pj)])
            plan.phases[static_cast<std::size_t>(pi * s + pj)].push_back(
                {a.rel, b.rel, a.lr_offset, b.lr_offset,
                 static_cast<std::ptrdiff_t>(a.lr_offset) * static_cast<std::ptrdiff_t>(w_lr) + b.lr_offset});
    return plan;
  }

  const std::vector<Tap>& phase(std::size_t i, std::size_t j) const {
    const auto s = static_cast<std::size_t>(stride);
    return phases[(i % s) * s + (j % s)];
  }
  std::size_t n_phase(std::size_t pi, std::size_t pj) const {
    return phases[pi * static_cast<std::size_t>(stride) + pj].size();
  }
  std::size_t max_taps() const {
    std::size_t m = 0;
    for (const auto& p : phases) m = std::max(m, p.size());
    return m;
  }
};

// ---------------------------------------------------------------------------
// FLOP model

/// Sum over output rows of the number of kept input rows inside the window.
inline std::uint64_t valid_pairs_axis(std::uint64_t n_lr, std::uint64_t s, std::uint64_t k) {
  const auto r = static_cast<std::int64_t>((k - 1) / 2);
  const auto last = static_cast<std::int64_t>(s * n_lr) - 1;
  std::uint64_t total = 0;
  for (std::uint64_t u = 0; u < n_lr; ++u) {
    const auto c = static_cast<std::int64_t>(s * u);
    total += static_cast<std::uint64_t>(std::min(last, c + r) - std::max<std::int64_t>(0, c - r) + 1);
  }
  return total;
}

inline std::uint64_t flops_attention_upsample(std::uint64_t c_in, std::uint64_t c_out, std::uint64_t h,
                                              std::uint64_t w, std::uint64_t s, std::uint64_t k) {
  if (!c_in || !c_out || !h || !w || !s || !k) throw ParamError("flops: arguments must be positive");
  const std::uint64_t pairs = valid_pairs_axis(h, s, k) * valid_pairs_axis(w, s, k);
  const std::uint64_t interp = s > 1 ? 4 * c_out * s * h * s * w : 0;
  return 3 * c_in * c_out * h * w + interp + 2 * c_out * pairs;
}

inline std::uint64_t flops_transposed_conv(std::uint64_t c_in, std::uint64_t c_out, std::uint64_t h,
                                           std::uint64_t w, std::uint64_t s, std::uint64_t k) {
  if (!c_in || !c_out || !h || !w || !s || !k) throw ParamError("flops: arguments must be positive");
  return c_in * c_out * valid_pairs_axis(h, s, k) * valid_pairs_axis(w, s, k);
}

// ---------------------------------------------------------------------------
// Layout helpers

namespace detail {

/// C x N  ->  N x C
template <class T>
std::vector<T> to_pixel_major(const Tensor<T>& x) {
  const std::size_t C = x.dim(0), N = x.size() / C;
  std::vector<T> out(x.size());
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = x.ptr() + c * N;
    for (std::size_t p = 0; p < N; ++p) out[p * C + c] = src[p];
  }
  return out;
}

/// N x C  ->  C x H x W (accumulating when `acc`)
template <class T>
void from_pixel_major(const std::vector<T>& src, Tensor<T>& dst, bool acc = false) {
  const std::size_t C = dst.dim(0), N = dst.size() / C;
  for (std::size_t c = 0; c < C; ++c) {
    T* d = dst.ptr() + c * N;
    if (acc)
      for (std::size_t p = 0; p < N; ++p) d[p] += src[p * C + c];
    else
      for (std::size_t p = 0; p < N; ++p) d[p] = src[p * C + c];
  }
}

/// out[p][o] = sum_c w[o][c] x[p][c] for pixel-major x (N x C_in).
template <class T>
std::vector<T> project_pixel_major(const std::vector<T>& x, std::size_t n, const Tensor<T>& w, int threads) {
  const std::size_t cout = w.dim(0), cin = w.dim(1);
  std::vector<T> out(n * cout);
  parallel_for(n, threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t p = b; p < e; ++p)
      for (std::size_t o = 0; o < cout; ++o)
        out[p * cout + o] = dot_lanes(w.ptr() + o * cin, x.data() + p * cin, cin);
  });
  return out;
}

/// Pixel-major bilinear upsampling with the reference coordinate convention.
template <class T>
std::vector<T> bilinear_pixel_major(const std::vector<T>& q, std::size_t C, std::size_t H, std::size_t W,
                                    int s, int threads) {
  const std::size_t S = static_cast<std::size_t>(s), OH = S * H, OW = S * W;
  std::vector<T> out(OH * OW * C);
  parallel_for(OH, threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto ty = lerp_tap(i, S, H);
      const T wy1 = static_cast<T>(ty.frac), wy0 = T{1} - wy1;
      for (std::size_t j = 0; j < OW; ++j) {
        const auto tx = lerp_tap(j, S, W);
        const T wx1 = static_cast<T>(tx.frac), wx0 = T{1} - wx1;
        const T* a = q.data() + (ty.lo * W + tx.lo) * C;
        const T* bq = q.data() + (ty.lo * W + tx.hi) * C;
        const T* c0 = q.data() + (ty.hi * W + tx.lo) * C;
        const T* d = q.data() + (ty.hi * W + tx.hi) * C;
        T* o = out.data() + (i * OW + j) * C;
        for (std::size_t c = 0; c < C; ++c)
          o[c] = wy0 * (wx0 * a[c] + wx1 * bq[c]) + wy1 * (wx0 * c0[c] + wx1 * d[c]);
      }
    }
  });
  return out;
}

/// Shared geometry of the masked attention core.
struct AttnGeometry {
  std::size_t C, Cv, H, W, S, OH, OW;
  int K, r;
};

/// Masked local attention on pixel-major buffers.
/// q: OH*OW x C, k: H*W x C, v: H*W x Cv, px/py: K x C/2 (row-major).
/// alpha (optional) receives OH*OW x max_taps coefficients; taps that fall
/// outside the image get 0.
template <class T>
std::vector<T> attend_pixel_major(const AttnGeometry& g, const PhasePlan& plan, const T* q, const T* k,
                                  const T* v, const T* px, const T* py, T scale, int threads,
                                  std::type_identity_t<std::vector<T>>* alpha) {
  const std::size_t half = g.C / 2, maxn = plan.max_taps();
  std::size_t max_axis = 0;
  for (const auto& a : plan.axis) max_axis = std::max(max_axis, a.size());
  std::vector<T> out(g.OH * g.OW * g.Cv, T{0});
  if (alpha) alpha->assign(g.OH * g.OW * maxn, T{0});
  parallel_for(g.OH, threads, [&](std::size_t rb, std::size_t re) {
    std::vector<T> qpx(max_axis), qpy(max_axis), logit(maxn);
    std::vector<std::ptrdiff_t> src(maxn);
    for (std::size_t i = rb; i < re; ++i) {
      const std::size_t pi = i % g.S;
      const auto bi = static_cast<std::ptrdiff_t>(i / g.S);
      const auto& rows = plan.axis[pi];
      for (std::size_t j = 0; j < g.OW; ++j) {
        const std::size_t pj = j % g.S;
        const auto bj = static_cast<std::ptrdiff_t>(j / g.S);
        const auto& cols = plan.axis[pj];
        const T* qp = q + (i * g.OW + j) * g.C;
        for (std::size_t a = 0; a < rows.size(); ++a)
          qpx[a] = dot_lanes(qp, px + static_cast<std::size_t>(rows[a].rel + g.r) * half, half);
        for (std::size_t b = 0; b < cols.size(); ++b)
          qpy[b] = dot_lanes(qp + half, py + static_cast<std::size_t>(cols[b].rel + g.r) * half, half);

        T peak = -std::numeric_limits<T>::infinity();
        std::size_t n = 0;
        for (std::size_t a = 0; a < rows.size(); ++a) {
          const std::ptrdiff_t u = bi + rows[a].lr_offset;
          for (std::size_t b = 0; b < cols.size(); ++b, ++n) {
            const std::ptrdiff_t vv = bj + cols[b].lr_offset;
            if (u < 0 || u >= static_cast<std::ptrdiff_t>(g.H) || vv < 0 || vv >= static_cast<std::ptrdiff_t>(g.W)) {
              src[n] = -1;
              continue;
            }
            src[n] = u * static_cast<std::ptrdiff_t>(g.W) + vv;
            const T l = (dot_lanes(qp, k + static_cast<std::size_t>(src[n]) * g.C, g.C) + qpx[a] + qpy[b]) * scale;
            logit[n] = l;
            peak = std::max(peak, l);
          }
        }
        if (peak == -std::numeric_limits<T>::infinity()) throw EmptyWindowError("fast attention");
        T z = 0;
        for (std::size_t t = 0; t < n; ++t) {
          if (src[t] < 0) continue;
          logit[t] = std::exp(logit[t] - peak);
          z += logit[t];
        }
        const T inv = T{1} / z;
        T* o = out.data() + (i * g.OW + j) * g.Cv;
        T* al = alpha ? alpha->data() + (i * g.OW + j) * maxn : nullptr;
        for (std::size_t t = 0; t < n; ++t) {
          if (src[t] < 0) continue;
          const T w = logit[t] * inv;
          if (al) al[t] = w;
          const T* vp = v + static_cast<std::size_t>(src[t]) * g.Cv;
          for (std::size_t c = 0; c < g.Cv; ++c) o[c] += w * vp[c];
        }
      }
    }
  });
  return out;
}

/// Adjoint of attend_pixel_major. All gradient buffers accumulate.
template <class T>
void attend_pixel_major_backward(const AttnGeometry& g, const PhasePlan& plan, const T* q, const T* k,
                                 const T* v, const T* px, const T* py, T scale, const std::vector<T>& alpha,
                                 const T* dout, T* dq, T* dk, T* dv, T* dpx, T* dpy) {
  const std::size_t half = g.C / 2, maxn = plan.max_taps();
  std::vector<T> gn(maxn);
  for (std::size_t i = 0; i < g.OH; ++i) {
    const auto& rows = plan.axis[i % g.S];
    const auto bi = static_cast<std::ptrdiff_t>(i / g.S);
    for (std::size_t j = 0; j < g.OW; ++j) {
      const auto& cols = plan.axis[j % g.S];
      const auto bj = static_cast<std::ptrdiff_t>(j / g.S);
      const std::size_t pix = i * g.OW + j;
      const T* al = alpha.data() + pix * maxn;
      const T* go = dout + pix * g.Cv;
      const T* qp = q + pix * g.C;
      T* dqp = dq + pix * g.C;

      T mean = 0;
      std::size_t n = 0;
      for (std::size_t a = 0; a < rows.size(); ++a) {
        const std::ptrdiff_t u = bi + rows[a].lr_offset;
        for (std::size_t b = 0; b < cols.size(); ++b, ++n) {
          const std::ptrdiff_t vv = bj + cols[b].lr_offset;
          if (u < 0 || u >= static_cast<std::ptrdiff_t>(g.H) || vv < 0 || vv >= static_cast<std::ptrdiff_t>(g.W))
            continue;
          const std::size_t s = static_cast<std::size_t>(u) * g.W + static_cast<std::size_t>(vv);
          gn[n] = dot_lanes(go, v + s * g.Cv, g.Cv);
          mean += al[n] * gn[n];
          T* dvp = dv + s * g.Cv;
          for (std::size_t c = 0; c < g.Cv; ++c) dvp[c] += al[n] * go[c];
        }
      }
      n = 0;
      for (std::size_t a = 0; a < rows.size(); ++a) {
        const std::ptrdiff_t u = bi + rows[a].lr_offset;
        const T* pxr = px + static_cast<std::size_t>(rows[a].rel + g.r) * half;
        T* dpxr = dpx + static_cast<std::size_t>(rows[a].rel + g.r) * half;
        for (std::size_t b = 0; b < cols.size(); ++b, ++n) {
          const std::ptrdiff_t vv = bj + cols[b].lr_offset;
          if (u < 0 || u >= static_cast<std::ptrdiff_t>(g.H) || vv < 0 || vv >= static_cast<std::ptrdiff_t>(g.W))
            continue;
          const std::size_t s = static_cast<std::size_t>(u) * g.W + static_cast<std::size_t>(vv);
          const T dl = al[n] * (gn[n] - mean) * scale;
          const T* kp = k + s * g.C;
          const T* pyr = py + static_cast<std::size_t>(cols[b].rel + g.r) * half;
          T* dpyr = dpy + static_cast<std::size_t>(cols[b].rel + g.r) * half;
          T* dkp = dk + s * g.C;
          for (std::size_t c = 0; c < half; ++c) {
            dqp[c] += dl * (kp[c] + pxr[c]);
            dqp[half + c] += dl * (kp[half + c] + pyr[c]);
          }
          for (std::size_t c = 0; c < g.C; ++c) dkp[c] += dl * qp[c];
          for (std::size_t c = 0; c < half; ++c) {
            dpxr[c] += dl * qp[c];
            dpyr[c] += dl * qp[half + c];
          }
        }
      }
    }
  }
}

inline void check_attention_shapes(const Shape& q, const Shape& k, const Shape& v, const Shape& pos, int s, int kk) {
  if (q.size() != 3 || k.size() != 3 || v.size() != 3) throw ShapeError("masked attention: rank-3 inputs required");
  const auto S = static_cast<std::size_t>(s);
  if (q[0] != k[0]) throw ShapeError("masked attention: query/key channel mismatch");
  if (q[0] % 2) throw ParamError("masked attention: query channels must be even");
  if (k[1] != v[1] || k[2] != v[2]) throw ShapeError("masked attention: key/value grids differ");
  if (q[1] != S * k[1] || q[2] != S * k[2])
    throw ShapeError("masked attention: query grid " + to_string(q) + " is not " + std::to_string(s) +
                     "x key grid " + to_string(k));
  if (pos != Shape{static_cast<std::size_t>(kk), q[0] / 2}) throw ShapeError("masked attention: positional table shape");
  if (kk < 2 * s - 1) throw EmptyWindowError("kernel size below 2*stride-1");
}

}  // namespace detail

/// Saved state of one masked attention evaluation, enough to run its adjoint.
template <class T>
struct AttentionContext {
  detail::AttnGeometry geom{};
  PhasePlan plan;
  std::vector<T> q, k, v, alpha;  // pixel-major
  T scale{1};
};

/// Masked local attention between a dense high-resolution query map and
/// low-resolution key/value maps: the core of attention upsampling.
/// q_hr: C x SH x SW, k_lr: C x H x W, v_lr: Cv x H x W.
template <class T>
Tensor<T> masked_attention(const Tensor<T>& q_hr, const Tensor<T>& k_lr, const Tensor<T>& v_lr,
                           const Tensor<T>& pos_x, const Tensor<T>& pos_y, int s, int kernel, T scale,
                           int threads = default_threads(), AttentionContext<T>* ctx = nullptr) {
  detail::check_attention_shapes(q_hr.shape(), k_lr.shape(), v_lr.shape(), pos_x.shape(), s, kernel);
  if (pos_y.shape() != pos_x.shape()) throw ShapeError("masked attention: positional tables differ");
  detail::AttnGeometry g{q_hr.dim(0), v_lr.dim(0), k_lr.dim(1), k_lr.dim(2), static_cast<std::size_t>(s),
                         q_hr.dim(1), q_hr.dim(2), kernel, (kernel - 1) / 2};
  AttentionContext<T> local;
  AttentionContext<T>& c = ctx ? *ctx : local;
  c.geom = g;
  c.plan = PhasePlan::build(s, kernel, g.W);
  c.scale = scale;
  c.q = detail::to_pixel_major(q_hr);
  c.k = detail::to_pixel_major(k_lr);
  c.v = detail::to_pixel_major(v_lr);
  const auto outT = detail::attend_pixel_major(g, c.plan, c.q.data(), c.k.data(), c.v.data(), pos_x.ptr(),
                                               pos_y.ptr(), scale, threads, ctx ? &c.alpha : nullptr);
  Tensor<T> out({g.Cv, g.OH, g.OW});
  detail::from_pixel_major(outT, out);
  return out;
}

/// Adjoint of masked_attention; every gradient tensor accumulates.
template <class T>
void masked_attention_backward(const AttentionContext<T>& ctx, const Tensor<T>& pos_x, const Tensor<T>& pos_y,
                               const Tensor<T>& dout, Tensor<T>& dq, Tensor<T>& dk, Tensor<T>& dv, Tensor<T>& dpx,
                               Tensor<T>& dpy) {
  if (ctx.alpha.empty()) throw TapeError("masked_attention_backward: forward did not save coefficients");
  const auto& g = ctx.geom;
  const auto go = detail::to_pixel_major(dout);
  std::vector<T> dqT(ctx.q.size(), T{0}), dkT(ctx.k.size(), T{0}), dvT(ctx.v.size(), T{0});
  detail::attend_pixel_major_backward(g, ctx.plan, ctx.q.data(), ctx.k.data(), ctx.v.data(), pos_x.ptr(),
                                      pos_y.ptr(), ctx.scale, ctx.alpha, go.data(), dqT.data(), dkT.data(),
                                      dvT.data(), dpx.ptr(), dpy.ptr());
  detail::from_pixel_major(dqT, dq, true);
  detail::from_pixel_major(dkT, dk, true);
  detail::from_pixel_major(dvT, dv, true);
}

/// Attention upsampling without materializing the zero-upsampled maps.
template <class T>
Tensor<T> attention_upsample_fast(const Tensor<T>& x, const AttnUpsampleParams<T>& p,
                                  int threads = default_threads()) {
  p.validate();
  detail::require_rank(x.shape(), 3, "attention_upsample_fast input");
  if (p.w_q.dim(1) != x.dim(0) || p.w_v.dim(1) != x.dim(0)) throw ShapeError("attention_upsample_fast: channel mismatch");
  const std::size_t H = x.dim(1), W = x.dim(2), n = H * W, C = p.c_out();
  detail::AttnGeometry g{C, C, H, W, static_cast<std::size_t>(p.stride), H * p.stride, W * p.stride,
                         p.kernel_size, p.radius()};
  const auto plan = PhasePlan::build(p.stride, p.kernel_size, W);
  const auto xT = detail::to_pixel_major(x);
  const auto q = detail::project_pixel_major(xT, n, p.w_q, threads);
  const auto k = detail::project_pixel_major(xT, n, p.w_k, threads);
  const auto v = detail::project_pixel_major(xT, n, p.w_v, threads);
  const auto q_up = p.stride > 1 ? detail::bilinear_pixel_major(q, C, H, W, p.stride, threads) : q;
  const auto outT = detail::attend_pixel_major(g, plan, q_up.data(), k.data(), v.data(), p.pos_x.ptr(),
                                               p.pos_y.ptr(), p.logit_scale(), threads, nullptr);
  Tensor<T> out({C, g.OH, g.OW});
  detail::from_pixel_major(outT, out);
  return out;
}

/// Guided attention upsampling. Keys are projected only at kept samples.
template <class T>
Tensor<T> attention_joint_upsample_fast(const Tensor<T>& x_lr, const Tensor<T>& x_hr, const AttnUpsampleParams<T>& p,
                                        int threads = default_threads()) {
  p.validate();
  const auto S = static_cast<std::size_t>(p.stride);
  if (x_hr.rank() != 3 || x_lr.rank() != 3 || x_hr.dim(1) != S * x_lr.dim(1) || x_hr.dim(2) != S * x_lr.dim(2))
    throw ShapeError("joint upsample: guide " + to_string(x_hr.shape()) + " is not " + std::to_string(S) +
                     "x target " + to_string(x_lr.shape()));
  const std::size_t H = x_lr.dim(1), W = x_lr.dim(2), C = p.c_out();
  detail::AttnGeometry g{C, C, H, W, S, S * H, S * W, p.kernel_size, p.radius()};
  const auto plan = PhasePlan::build(p.stride, p.kernel_size, W);
  const auto hrT = detail::to_pixel_major(x_hr);
  const auto q = detail::project_pixel_major(hrT, S * H * S * W, p.w_q, threads);
  const auto kept = detail::to_pixel_major(grid_pick(x_hr, p.stride));
  const auto k = detail::project_pixel_major(kept, H * W, p.w_k, threads);
  const auto v = detail::project_pixel_major(detail::to_pixel_major(x_lr), H * W, p.w_v, threads);
  const auto outT = detail::attend_pixel_major(g, plan, q.data(), k.data(), v.data(), p.pos_x.ptr(), p.pos_y.ptr(),
                                               p.logit_scale(), threads, nullptr);
  Tensor<T> out({C, g.OH, g.OW});
  detail::from_pixel_major(outT, out);
  return out;
}

/// Transposed convolution that visits only taps landing on kept samples.
template <class T>
Tensor<T> transposed_conv2d_fast(const Tensor<T>& x, const DeconvParams<T>& p, int threads = default_threads()) {
  detail::require_rank(x.shape(), 3, "transposed_conv2d_fast input");
  const std::size_t cout = p.w.dim(0), cin = p.w.dim(1), K = p.w.dim(2);
  if (x.dim(0) != cin) throw ShapeError("transposed_conv2d_fast: channel mismatch");
  const std::size_t H = x.dim(1), W = x.dim(2), S = static_cast<std::size_t>(p.stride);
  const std::size_t OH = S * H, OW = S * W;
  const int r = static_cast<int>(K - 1) / 2;
  const auto plan = PhasePlan::build(p.stride, static_cast<int>(K), W);
  // [kh][kw][co][ci]
  std::vector<T> wt(K * K * cout * cin);
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t kh = 0; kh < K; ++kh)
        for (std::size_t kw = 0; kw < K; ++kw)
          wt[((kh * K + kw) * cout + co) * cin + ci] = p.w[((co * cin + ci) * K + kh) * K + kw];
  const auto xT = detail::to_pixel_major(x);
  std::vector<T> outT(OH * OW * cout, T{0});
  parallel_for(OH, threads, [&](std::size_t rb, std::size_t re) {
    for (std::size_t i = rb; i < re; ++i) {
      const auto bi = static_cast<std::ptrdiff_t>(i / S);
      for (std::size_t j = 0; j < OW; ++j) {
        const auto bj = static_cast<std::ptrdiff_t>(j / S);
        T* o = outT.data() + (i * OW + j) * cout;
        for (const auto& t : plan.phase(i, j)) {
          const std::ptrdiff_t u = bi + t.du, v = bj + t.dv;
          if (u < 0 || u >= static_cast<std::ptrdiff_t>(H) || v < 0 || v >= static_cast<std::ptrdiff_t>(W)) continue;
          const T* xp = xT.data() + static_cast<std::size_t>(u * static_cast<std::ptrdiff_t>(W) + v) * cin;
          const T* wp = wt.data() + static_cast<std::size_t>((t.dx + r) * static_cast<int>(K) + (t.dy + r)) * cout * cin;
          for (std::size_t co = 0; co < cout; ++co) o[co] += detail::dot_lanes(wp + co * cin, xp, cin);
        }
      }
    }
  });
  Tensor<T> out({cout, OH, OW});
  detail::from_pixel_major(outT, out);
  return out;
}

}  // namespace atup
