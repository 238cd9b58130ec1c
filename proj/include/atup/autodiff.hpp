#pragma once

// Reverse-mode differentiation on an explicit tape.
//
// Values live in shared nodes; every differentiable op computes its forward
// result eagerly and, when recording, appends a closure that pulls the
// output gradient back into its inputs. Gradients accumulate (+=), so a
// parameter used twice receives the sum of both contributions.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "atup/fast.hpp"
#include "atup/ops.hpp"
#include "atup/reference.hpp"
#include "atup/tensor.hpp"

namespace atup::ad {

template <class T>
class Tape;

/// A value plus its gradient buffer. Learnable parameters are nodes with a
/// name and requires_grad set.
template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first use, same shape as value
  std::string name;
  bool requires_grad = false;
  const void* producer = nullptr;  // tape that created this node, if any

  Tensor<T>& grad_buf() {
    if (grad.shape() != value.shape()) grad = Tensor<T>::zeros_like(value);
    return grad;
  }
  void zero_grad() {
    if (!grad.empty()) grad.fill(T{0});
  }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
using ParamSlot = Node<T>;

template <class T>
Var<T> leaf(Tensor<T> value, bool requires_grad = false, std::string name = {}) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->name = std::move(name);
  return n;
}

template <class T>
Var<T> param(std::string name, Tensor<T> value) {
  return leaf(std::move(value), true, std::move(name));
}

template <class T>
class Tape {
 public:
  struct Record {
    std::string op;
    std::function<void()> backward;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return records_.size(); }
  const std::vector<Record>& records() const noexcept { return records_; }

  /// Output node for an op; `rg` marks it as needing a gradient.
  Var<T> emit(Tensor<T> value, bool rg) {
    auto n = leaf(std::move(value), rg && recording_);
    n->producer = this;
    return n;
  }

  void push(std::string op, std::function<void()> fn) {
    if (recording_) records_.push_back({std::move(op), std::move(fn)});
  }

  /// Seeds d(root)/d(root) = 1 and replays the records in reverse. Each
  /// record is consumed; replaying twice is an error.
  void backward(const Var<T>& root) {
    if (!root) throw TapeError("backward on a null node");
    if (records_.empty() || root->producer != this)
      throw TapeError("backward before forward: root was not produced on this tape");
    if (root->value.size() != 1) throw TapeError("backward root must be a scalar");
    root->grad_buf().fill(T{1});
    while (!records_.empty()) {
      auto rec = std::move(records_.back());
      records_.pop_back();
      rec.backward();
    }
    consumed_ = true;
  }

  bool consumed() const noexcept { return consumed_; }

  void clear() {
    records_.clear();
    consumed_ = false;
  }

 private:
  bool recording_;
  bool consumed_ = false;
  std::vector<Record> records_;
};

namespace detail {

template <class T>
bool needs(const Var<T>& v) {
  return v && v->requires_grad;
}

template <class T, class... V>
bool any_needs(const V&... v) {
  return (needs<T>(v) || ...);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(Tape<T>& t, const Var<T>& a, const Var<T>& b) {
  auto out = t.emit(a->value + b->value, detail::any_needs<T>(a, b));
  if (out->requires_grad)
    t.push("add", [a, b, o = out] {
      if (a->requires_grad) axpy(T{1}, o->grad_buf(), a->grad_buf());
      if (b->requires_grad) axpy(T{1}, o->grad_buf(), b->grad_buf());
    });
  return out;
}

/// x + c elementwise for a constant c.
template <class T>
Var<T> add_scalar(Tape<T>& t, const Var<T>& x, T c) {
  Tensor<T> y = x->value;
  for (auto& v : y.data()) v += c;
  auto out = t.emit(std::move(y), x->requires_grad);
  if (out->requires_grad) t.push("add_scalar", [x, o = out] { axpy(T{1}, o->grad_buf(), x->grad_buf()); });
  return out;
}

template <class T>
Var<T> relu(Tape<T>& t, const Var<T>& x) {
  Tensor<T> y = x->value;
  for (auto& v : y.data()) v = v > T{0} ? v : T{0};
  auto out = t.emit(std::move(y), x->requires_grad);
  if (out->requires_grad)
    t.push("relu", [x, o = out] {
      auto& g = x->grad_buf();
      const auto& go = o->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x->value[i] > T{0}) g[i] += go[i];
    });
  return out;
}

/// Per-channel leaky slope: y = x if x > 0 else slope[c] * x.
template <class T>
Var<T> prelu(Tape<T>& t, const Var<T>& x, const Var<T>& slope) {
  const std::size_t C = x->value.dim(0), n = x->value.size() / C;
  if (slope->value.size() != C) throw ShapeError("prelu: one slope per channel required");
  Tensor<T> y = x->value;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < n; ++p) {
      T& v = y[c * n + p];
      if (v <= T{0}) v *= slope->value[c];
    }
  auto out = t.emit(std::move(y), detail::any_needs<T>(x, slope));
  if (out->requires_grad)
    t.push("prelu", [x, slope, o = out, C, n] {
      const auto& go = o->grad_buf();
      for (std::size_t c = 0; c < C; ++c) {
        const T a = slope->value[c];
        T ds = 0;
        for (std::size_t p = 0; p < n; ++p) {
          const std::size_t i = c * n + p;
          const T xv = x->value[i];
          if (xv > T{0}) {
            if (x->requires_grad) x->grad_buf()[i] += go[i];
          } else {
            if (x->requires_grad) x->grad_buf()[i] += a * go[i];
            ds += xv * go[i];
          }
        }
        if (slope->requires_grad) slope->grad_buf()[c] += ds;
      }
    });
  return out;
}

/// Channel concatenation of two C x H x W maps.
template <class T>
Var<T> concat(Tape<T>& t, const Var<T>& a, const Var<T>& b) {
  const auto& A = a->value;
  const auto& B = b->value;
  if (A.rank() != 3 || B.rank() != 3 || A.dim(1) != B.dim(1) || A.dim(2) != B.dim(2))
    throw ShapeError("concat: spatial mismatch " + to_string(A.shape()) + " vs " + to_string(B.shape()));
  Tensor<T> y({A.dim(0) + B.dim(0), A.dim(1), A.dim(2)});
  std::copy(A.data().begin(), A.data().end(), y.data().begin());
  std::copy(B.data().begin(), B.data().end(), y.data().begin() + static_cast<std::ptrdiff_t>(A.size()));
  auto out = t.emit(std::move(y), detail::any_needs<T>(a, b));
  if (out->requires_grad)
    t.push("concat", [a, b, o = out] {
      const auto& go = o->grad_buf();
      const std::size_t na = a->value.size();
      if (a->requires_grad)
        for (std::size_t i = 0; i < na; ++i) a->grad_buf()[i] += go[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < b->value.size(); ++i) b->grad_buf()[i] += go[na + i];
    });
  return out;
}

/// Channels [begin, end) of a C x H x W map.
template <class T>
Var<T> slice_channels(Tape<T>& t, const Var<T>& x, std::size_t begin, std::size_t end) {
  const auto& X = x->value;
  if (X.rank() != 3 || begin >= end || end > X.dim(0)) throw ShapeError("slice_channels: bad range");
  const std::size_t plane = X.dim(1) * X.dim(2);
  Tensor<T> y({end - begin, X.dim(1), X.dim(2)});
  std::copy(X.ptr() + begin * plane, X.ptr() + end * plane, y.ptr());
  auto out = t.emit(std::move(y), x->requires_grad);
  if (out->requires_grad)
    t.push("slice_channels", [x, o = out, off = begin * plane] {
      const auto& go = o->grad_buf();
      auto& g = x->grad_buf();
      for (std::size_t i = 0; i < go.size(); ++i) g[off + i] += go[i];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions and resampling

/// Same-size convolution, padding (K-1)/2.
template <class T>
Var<T> conv2d(Tape<T>& t, const Var<T>& x, const Var<T>& w) {
  const int pad = static_cast<int>(w->value.dim(2) - 1) / 2;
  auto out = t.emit(atup::conv2d(x->value, w->value, pad), detail::any_needs<T>(x, w));
  if (out->requires_grad)
    t.push("conv2d", [x, w, o = out, pad] {
      if (x->requires_grad) conv2d_backward_input(o->grad_buf(), w->value, pad, x->grad_buf());
      if (w->requires_grad) conv2d_backward_weight(o->grad_buf(), x->value, pad, w->grad_buf());
    });
  return out;
}

template <class T>
Var<T> conv1x1(Tape<T>& t, const Var<T>& x, const Var<T>& w) {
  auto out = t.emit(atup::conv1x1(x->value, w->value), detail::any_needs<T>(x, w));
  if (out->requires_grad)
    t.push("conv1x1", [x, w, o = out] {
      if (x->requires_grad) conv1x1_backward_input(o->grad_buf(), w->value, x->grad_buf());
      if (w->requires_grad) conv1x1_backward_weight(o->grad_buf(), x->value, w->grad_buf());
    });
  return out;
}

template <class T>
Var<T> zero_upsample(Tape<T>& t, const Var<T>& x, int s) {
  auto out = t.emit(atup::zero_upsample(x->value, s), x->requires_grad);
  if (out->requires_grad)
    t.push("zero_upsample", [x, o = out, s] { axpy(T{1}, grid_pick(o->grad_buf(), s), x->grad_buf()); });
  return out;
}

template <class T>
Var<T> grid_pick(Tape<T>& t, const Var<T>& x, int s) {
  auto out = t.emit(atup::grid_pick(x->value, s), x->requires_grad);
  if (out->requires_grad)
    t.push("grid_pick", [x, o = out, s] { axpy(T{1}, atup::zero_upsample(o->grad_buf(), s), x->grad_buf()); });
  return out;
}

template <class T>
Var<T> bilinear_upsample(Tape<T>& t, const Var<T>& x, int s) {
  auto out = t.emit(atup::bilinear_upsample(x->value, s), x->requires_grad);
  if (out->requires_grad)
    t.push("bilinear_upsample", [x, o = out, s] { bilinear_upsample_backward(o->grad_buf(), s, x->grad_buf()); });
  return out;
}

/// Zero-upsample then convolve: the same code path as the reference operator.
template <class T>
Var<T> transposed_conv2d(Tape<T>& t, const Var<T>& x, const Var<T>& w, int s) {
  return conv2d(t, zero_upsample(t, x, s), w);
}

// ---------------------------------------------------------------------------
// Attention

/// Learnable tensors of one attention layer as graph nodes.
template <class T>
struct AttnVars {
  Var<T> w_q, w_k, w_v, pos_x, pos_y;
  int kernel_size = 3;
  int stride = 2;
  bool scale_logits = true;

  T logit_scale() const {
    return scale_logits ? static_cast<T>(1.0 / std::sqrt(static_cast<double>(w_q->value.dim(0)))) : T{1};
  }
  std::vector<Var<T>> all() const { return {w_q, w_k, w_v, pos_x, pos_y}; }

  static AttnVars from(const AttnUpsampleParams<T>& p, const std::string& prefix) {
    return {param(prefix + ".w_q", p.w_q), param(prefix + ".w_k", p.w_k), param(prefix + ".w_v", p.w_v),
            param(prefix + ".pos_x", p.pos_x), param(prefix + ".pos_y", p.pos_y), p.kernel_size, p.stride,
            p.scale_logits};
  }
  AttnUpsampleParams<T> snapshot() const {
    return {w_q->value, w_k->value, w_v->value, pos_x->value, pos_y->value, kernel_size, stride, scale_logits};
  }
};

/// Masked local attention of a dense query map over low-resolution keys and
/// values (see atup::masked_attention).
template <class T>
Var<T> masked_attention(Tape<T>& t, const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& px,
                        const Var<T>& py, int s, int kernel, T scale) {
  const bool rg = detail::any_needs<T>(q, k, v, px, py) && t.recording();
  auto ctx = rg ? std::make_shared<AttentionContext<T>>() : nullptr;
  auto out = t.emit(atup::masked_attention(q->value, k->value, v->value, px->value, py->value, s, kernel, scale,
                                           default_threads(), ctx.get()),
                    rg);
  if (out->requires_grad)
    t.push("masked_attention", [q, k, v, px, py, ctx, o = out] {
      Tensor<T> dq = Tensor<T>::zeros_like(q->value), dk = Tensor<T>::zeros_like(k->value),
                dv = Tensor<T>::zeros_like(v->value), dpx = Tensor<T>::zeros_like(px->value),
                dpy = Tensor<T>::zeros_like(py->value);
      masked_attention_backward(*ctx, px->value, py->value, o->grad_buf(), dq, dk, dv, dpx, dpy);
      if (q->requires_grad) axpy(T{1}, dq, q->grad_buf());
      if (k->requires_grad) axpy(T{1}, dk, k->grad_buf());
      if (v->requires_grad) axpy(T{1}, dv, v->grad_buf());
      if (px->requires_grad) axpy(T{1}, dpx, px->grad_buf());
      if (py->requires_grad) axpy(T{1}, dpy, py->grad_buf());
    });
  return out;
}

/// Attention upsampling: 1x1 projections, bilinear queries, masked attention.
template <class T>
Var<T> attention_upsample(Tape<T>& t, const Var<T>& x, const AttnVars<T>& p) {
  auto q = conv1x1(t, x, p.w_q);
  auto k = conv1x1(t, x, p.w_k);
  auto v = conv1x1(t, x, p.w_v);
  auto q_up = bilinear_upsample(t, q, p.stride);
  return masked_attention(t, q_up, k, v, p.pos_x, p.pos_y, p.stride, p.kernel_size, p.logit_scale());
}

/// Local self-attention convolution (stride 1).
template <class T>
Var<T> attention_conv(Tape<T>& t, const Var<T>& x, const AttnVars<T>& p) {
  auto q = conv1x1(t, x, p.w_q);
  auto k = conv1x1(t, x, p.w_k);
  auto v = conv1x1(t, x, p.w_v);
  return masked_attention(t, q, k, v, p.pos_x, p.pos_y, 1, p.kernel_size, p.logit_scale());
}

/// Guided attention upsampling: Q/K from the guide, V from the target.
template <class T>
Var<T> attention_joint_upsample(Tape<T>& t, const Var<T>& x_lr, const Var<T>& x_hr, const AttnVars<T>& p) {
  auto q = conv1x1(t, x_hr, p.w_q);
  auto k = grid_pick(t, conv1x1(t, x_hr, p.w_k), p.stride);
  auto v = conv1x1(t, x_lr, p.w_v);
  return masked_attention(t, q, k, v, p.pos_x, p.pos_y, p.stride, p.kernel_size, p.logit_scale());
}

/// Softmax over a 1-D logit vector with a {0, -inf} mask.
template <class T>
Var<T> softmax_masked(Tape<T>& t, const Var<T>& logits, std::vector<T> mask) {
  const auto probs = atup::softmax_masked<T>(logits->value.data(), mask);
  auto out = t.emit(Tensor<T>(logits->value.shape(), probs), logits->requires_grad);
  if (out->requires_grad)
    t.push("softmax_masked", [logits, o = out] {
      const auto g = softmax_backward<T>(o->value.data(), o->grad_buf().data());
      auto& dl = logits->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) dl[i] += g[i];
    });
  return out;
}

/// Y = softmax(Q K^T / sqrt(F)) V for N x F token matrices.
template <class T>
Var<T> scaled_dot_attention(Tape<T>& t, const Var<T>& q, const Var<T>& k, const Var<T>& v) {
  const std::size_t n = q->value.dim(0), fk = q->value.dim(1), fv = v->value.dim(1);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(fk)));
  Tensor<T> probs({n, n});
  std::vector<T> logits(n), zeros(n, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T a = 0;
      for (std::size_t f = 0; f < fk; ++f) a += q->value(i, f) * k->value(j, f);
      logits[j] = a * scale;
    }
    const auto w = atup::softmax_masked<T>(logits, zeros);
    for (std::size_t j = 0; j < n; ++j) probs(i, j) = w[j];
  }
  Tensor<T> y({n, fv});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t f = 0; f < fv; ++f) y(i, f) += probs(i, j) * v->value(j, f);
  auto out = t.emit(std::move(y), detail::any_needs<T>(q, k, v));
  if (out->requires_grad)
    t.push("scaled_dot_attention", [q, k, v, probs, o = out, n, fk, fv, scale] {
      const auto& go = o->grad_buf();
      std::vector<T> gp(n), dl;
      for (std::size_t i = 0; i < n; ++i) {
        std::span<const T> prow(probs.ptr() + i * n, n);
        for (std::size_t j = 0; j < n; ++j) {
          T s = 0;
          for (std::size_t f = 0; f < fv; ++f) s += go(i, f) * v->value(j, f);
          gp[j] = s;
          if (v->requires_grad)
            for (std::size_t f = 0; f < fv; ++f) v->grad_buf()(j, f) += probs(i, j) * go(i, f);
        }
        dl = softmax_backward<T>(prow, gp);
        for (std::size_t j = 0; j < n; ++j) {
          const T d = dl[j] * scale;
          for (std::size_t f = 0; f < fk; ++f) {
            if (q->requires_grad) q->grad_buf()(i, f) += d * k->value(j, f);
            if (k->requires_grad) k->grad_buf()(j, f) += d * q->value(i, f);
          }
        }
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Losses

/// sum (pred - target)^2
template <class T>
Var<T> sse_loss(Tape<T>& t, const Var<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred->value.shape(), target.shape(), "sse_loss");
  T s = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T d = pred->value[i] - target[i];
    s += d * d;
  }
  auto out = t.emit(Tensor<T>({1}, {s}), pred->requires_grad);
  if (out->requires_grad)
    t.push("sse_loss", [pred, target, o = out] {
      const T g = o->grad_buf()[0];
      auto& d = pred->grad_buf();
      for (std::size_t i = 0; i < target.size(); ++i) d[i] += T{2} * g * (pred->value[i] - target[i]);
    });
  return out;
}

/// mean (pred - target)^2
template <class T>
Var<T> mse_loss(Tape<T>& t, const Var<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred->value.shape(), target.shape(), "mse_loss");
  const T inv = T{1} / static_cast<T>(target.size());
  T s = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T d = pred->value[i] - target[i];
    s += d * d;
  }
  auto out = t.emit(Tensor<T>({1}, {s * inv}), pred->requires_grad);
  if (out->requires_grad)
    t.push("mse_loss", [pred, target, o = out, inv] {
      const T g = o->grad_buf()[0] * T{2} * inv;
      auto& d = pred->grad_buf();
      for (std::size_t i = 0; i < target.size(); ++i) d[i] += g * (pred->value[i] - target[i]);
    });
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference validation

struct CoordCheck {
  std::size_t index = 0;
  double analytic = 0, numeric = 0, error = 0;
};

struct ParamCheck {
  std::string name;
  std::size_t size = 0, checked = 0;
  CoordCheck worst;
  bool passed = true;
};

struct GradReport {
  std::vector<ParamCheck> params;
  double eps = 0, tol = 0;
  bool passed = true;

  std::string summary() const {
    std::ostringstream os;
    for (const auto& p : params)
      os << (p.passed ? "  ok   " : "  FAIL ") << p.name << "  coords " << p.checked << "/" << p.size
         << "  worst[" << p.worst.index << "] analytic " << p.worst.analytic << " numeric " << p.worst.numeric
         << " err " << p.worst.error << "\n";
    return os.str();
  }
};

/// Compares tape gradients of the scalar `f` against central differences.
/// Parameters with more than `min_coords` entries are checked on a seeded
/// random subsample of `min_coords` distinct coordinates.
inline GradReport finite_diff_check(const std::function<Var<double>(Tape<double>&)>& f,
                                    const std::vector<Var<double>>& params, double eps = 1e-4, double tol = 1e-5,
                                    std::size_t min_coords = 200, std::uint64_t seed = 0) {
  for (const auto& p : params) p->zero_grad();
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    auto loss = f(tape);
    tape.backward(loss);
    for (const auto& p : params) analytic.push_back(p->grad_buf());
  }
  auto eval = [&] {
    Tape<double> tape(false);
    return f(tape)->value[0];
  };

  GradReport rep;
  rep.eps = eps;
  rep.tol = tol;
  Rng rng(seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = *params[pi];
    std::vector<std::size_t> coords(p.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > min_coords) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(min_coords);
      std::sort(coords.begin(), coords.end());
    }
    ParamCheck pc{p.name.empty() ? "param" + std::to_string(pi) : p.name, p.value.size(), coords.size(), {}, true};
    pc.worst.error = -1;
    for (std::size_t idx : coords) {
      const double saved = p.value[idx];
      p.value[idx] = saved + eps;
      const double up = eval();
      p.value[idx] = saved - eps;
      const double down = eval();
      p.value[idx] = saved;
      const double num = (up - down) / (2 * eps);
      const double an = analytic[pi][idx];
      const double err = std::abs(an - num) / std::max(1.0, std::abs(an));
      if (err > pc.worst.error) pc.worst = {idx, an, num, err};
    }
    pc.passed = pc.worst.error < tol;
    rep.passed = rep.passed && pc.passed;
    rep.params.push_back(pc);
  }
  return rep;
}

}  // namespace atup::ad
