#pragma once

// Optimization, schedules, augmentation, patch pipelines, metrics and the
// training loops for both networks.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "atup/image_io.hpp"
#include "atup/models.hpp"

namespace atup {

enum class ScheduleKind { constant, step_decay, plateau };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::step_decay: return "step_decay";
    case ScheduleKind::plateau: return "plateau";
  }
  return "?";
}

inline ScheduleKind parse_schedule(const std::string& s) {
  if (s == "constant") return ScheduleKind::constant;
  if (s == "step_decay") return ScheduleKind::step_decay;
  if (s == "plateau") return ScheduleKind::plateau;
  throw ParamError("schedule must be constant, step_decay or plateau, got " + s);
}

struct TrainConfig {
  double lr0 = 1e-3;
  std::size_t batch = 16;
  int epochs = 100;
  long max_steps = 0;  // 0: no step limit
  ScheduleKind schedule = ScheduleKind::step_decay;
  std::vector<int> milestones{1200, 1600};
  double step_factor = 0.1;
  double plateau_factor = 0.8;
  int patience = 10;
  double plateau_threshold = 1e-4;
  std::uint64_t seed = 0;
  std::string loss = "mse";
  int patch = 0;         // 0: default for the scale
  int patch_stride = 0;  // 0: half the patch
  bool augment = true;
  bool augment_compose = false;
  int eval_every = 1;
  int checkpoint_every = 0;  // epochs; 0 keeps only the best checkpoint
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::filesystem::path out_dir;

  void validate() const {
    if (!(lr0 > 0)) throw ParamError("lr0 must be positive");
    if (batch == 0) throw ParamError("batch must be >= 1");
    if (epochs < 0 || max_steps < 0) throw ParamError("epochs and max_steps must be non-negative");
    for (double f : {step_factor, plateau_factor})
      if (!(f > 0 && f <= 1)) throw ParamError("decay factors must lie in (0, 1]");
    if (patience < 1) throw ParamError("patience must be >= 1");
    if (loss != "mse") throw ParamError("only the mse loss is implemented, got " + loss);
    if (patch < 0 || patch_stride < 0) throw ParamError("patch sizes must be non-negative");
    if (eval_every < 1) throw ParamError("eval_every must be >= 1");
  }
};

/// Patch side for an LR scale: 32 at 2x, 16 otherwise.
inline int default_patch(int scale) { return scale <= 2 ? 32 : 16; }

// ---------------------------------------------------------------------------
// Adam

template <class T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::uint64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// One bias-corrected Adam update from the gradients stored on `params`.
template <class T>
void adam_step(const std::vector<ad::Var<T>>& params, AdamState<T>& st, double lr) {
  if (st.m.empty())
    for (const auto& p : params) {
      st.m.push_back(Tensor<T>::zeros_like(p->value));
      st.v.push_back(Tensor<T>::zeros_like(p->value));
    }
  if (st.m.size() != params.size()) throw ShapeError("adam: state does not match parameter list");
  for (const auto& p : params) {
    const auto& g = p->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i]))
        throw NumericError("adam: non-finite gradient in " + p->name + " at index " + std::to_string(i) + " (step " +
                           std::to_string(st.step + 1) + ")");
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto& m = st.m[k];
    auto& v = st.v[k];
    const auto& g = p.grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i];
      const double mi = st.beta1 * m[i] + (1 - st.beta1) * gi;
      const double vi = st.beta2 * v[i] + (1 - st.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mh = mi / c1, vh = vi / c2;
      p.value[i] = static_cast<T>(p.value[i] - lr * mh / (std::sqrt(vh) + st.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Learning-rate schedules

/// Number of plateau decays triggered by an eval-loss history. The first
/// entry sets the reference; every entry that fails to beat the best by the
/// relative threshold counts toward `patience`.
inline int plateau_decays(const std::vector<double>& history, int patience, double threshold) {
  if (history.empty()) return 0;
  double best = history.front();
  int bad = 0, decays = 0;
  for (double h : history) {
    if (h < best * (1.0 - threshold)) {
      best = h;
      bad = 0;
    } else if (++bad >= patience) {
      ++decays;
      bad = 0;
    }
  }
  return decays;
}

/// Learning rate for `epoch` (number of completed epochs) given the eval
/// loss history so far.
inline double schedule_lr(const TrainConfig& c, int epoch, const std::vector<double>& eval_history) {
  switch (c.schedule) {
    case ScheduleKind::constant:
      return c.lr0;
    case ScheduleKind::step_decay: {
      int passed = 0;
      for (int m : c.milestones) passed += epoch >= m;
      return c.lr0 * std::pow(c.step_factor, passed);
    }
    case ScheduleKind::plateau:
      return c.lr0 * std::pow(c.plateau_factor, plateau_decays(eval_history, c.patience, c.plateau_threshold));
  }
  return c.lr0;
}

// ---------------------------------------------------------------------------
// Augmentation and patches

/// Quarter turn counter-clockwise: out(c, i, j) = x(c, j, W-1-i).
template <class T>
Tensor<T> rotate90(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 3, "rotate90");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor<T> out({C, W, H});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < W; ++i)
      for (std::size_t j = 0; j < H; ++j) out(c, i, j) = x(c, j, W - 1 - i);
  return out;
}

inline constexpr double kAugmentScales[] = {0.9, 0.8, 0.7, 0.6};

/// Original, its three quarter turns, then the four downscales (0.9 .. 0.6).
/// With `compose` every downscale is also rotated (20 variants).
template <class T>
std::vector<Tensor<T>> augment(const Tensor<T>& img, bool compose = false) {
  std::vector<Tensor<T>> scales{img};
  for (double f : kAugmentScales) {
    const auto h = static_cast<std::size_t>(std::lround(f * static_cast<double>(img.dim(1))));
    const auto w = static_cast<std::size_t>(std::lround(f * static_cast<double>(img.dim(2))));
    scales.push_back(bicubic_resize(img, std::max<std::size_t>(h, 1), std::max<std::size_t>(w, 1)));
  }
  std::vector<Tensor<T>> out;
  for (std::size_t s = 0; s < scales.size(); ++s) {
    out.push_back(scales[s]);
    if (s == 0 || compose) {
      auto r = scales[s];
      for (int q = 0; q < 3; ++q) out.push_back(r = rotate90(r));
    }
  }
  return out;
}

/// Crops to the largest multiple of `s` in both axes.
template <class T>
Tensor<T> modcrop(const Tensor<T>& x, std::size_t s) {
  const std::size_t H = x.dim(1) / s * s, W = x.dim(2) / s * s;
  if (H == 0 || W == 0) throw ShapeError("modcrop: image smaller than the scale");
  if (H == x.dim(1) && W == x.dim(2)) return x;
  Tensor<T> out({x.dim(0), H, W});
  for (std::size_t c = 0; c < x.dim(0); ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) out(c, i, j) = x(c, i, j);
  return out;
}

template <class T>
Tensor<T> crop(const Tensor<T>& x, std::size_t i0, std::size_t j0, std::size_t h, std::size_t w) {
  if (i0 + h > x.dim(1) || j0 + w > x.dim(2)) throw ShapeError("crop: window outside the image");
  Tensor<T> out({x.dim(0), h, w});
  for (std::size_t c = 0; c < x.dim(0); ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out(c, i, j) = x(c, i0 + i, j0 + j);
  return out;
}

/// Cubic downscale of the scale-cropped image.
template <class T>
Tensor<T> make_lr(const Tensor<T>& hr, int scale) {
  const auto s = static_cast<std::size_t>(scale);
  const auto hc = modcrop(hr, s);
  return bicubic_resize(hc, hc.dim(1) / s, hc.dim(2) / s);
}

template <class T>
struct PatchPair {
  Tensor<T> lr, hr;
};

/// m x m LR patches on a `stride` grid with their aligned (m*scale)^2 HR
/// regions. Empty when the LR image is smaller than one patch.
template <class T>
std::vector<PatchPair<T>> extract_patches(const Tensor<T>& hr_img, int scale, int m, int stride) {
  if (scale < 1 || m < 1 || stride < 1) throw ParamError("extract_patches: scale, m and stride must be positive");
  const auto s = static_cast<std::size_t>(scale), M = static_cast<std::size_t>(m), st = static_cast<std::size_t>(stride);
  if (hr_img.dim(1) < s * M || hr_img.dim(2) < s * M) return {};
  const auto hr = modcrop(hr_img, s);
  const auto lr = bicubic_resize(hr, hr.dim(1) / s, hr.dim(2) / s);
  std::vector<PatchPair<T>> out;
  if (lr.dim(1) < M || lr.dim(2) < M) return out;
  for (std::size_t i = 0; i + M <= lr.dim(1); i += st)
    for (std::size_t j = 0; j + M <= lr.dim(2); j += st)
      out.push_back({crop(lr, i, j, M, M), crop(hr, i * s, j * s, M * s, M * s)});
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

template <class T, class U>
double mse(const Tensor<T>& a, const Tensor<U>& b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

template <class T, class U>
double rmse(const Tensor<T>& a, const Tensor<U>& b) {
  return std::sqrt(mse(a, b));
}

inline double psnr_from_mse(double m, double max_val) {
  if (m == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / m);
}

/// Identical inputs give +inf.
template <class T, class U>
double psnr(const Tensor<T>& a, const Tensor<U>& b, double max_val) {
  return psnr_from_mse(mse(a, b), max_val);
}

/// Removes `b` pixels from every border.
template <class T>
Tensor<T> shave(const Tensor<T>& x, std::size_t b) {
  if (b == 0 || x.dim(1) <= 2 * b || x.dim(2) <= 2 * b) return x;
  return crop(x, b, b, x.dim(1) - 2 * b, x.dim(2) - 2 * b);
}

/// Top-left anchored point sampling every `factor` pixels. Dimensions that
/// are not multiples of the factor are cropped with a warning on `warn`.
template <class T>
Tensor<T> depth_grid_sample(const Tensor<T>& depth_hr, int factor, std::ostream* warn = &std::cerr) {
  if (factor < 1) throw ParamError("depth_grid_sample: factor must be >= 1");
  const auto f = static_cast<std::size_t>(factor);
  detail::require_rank(depth_hr.shape(), 3, "depth_grid_sample");
  if ((depth_hr.dim(1) % f || depth_hr.dim(2) % f) && warn)
    *warn << "warning: depth map " << to_string(depth_hr.shape()) << " cropped to a multiple of " << f << "\n";
  return grid_pick(modcrop(depth_hr, f), factor);
}

// ---------------------------------------------------------------------------
// Metric log

struct MetricRow {
  int epoch = 0;
  std::string split;
  double loss = 0, psnr_db = 0, rmse = 0, lr = 0;
};

inline std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline constexpr std::string_view kMetricHeader = "epoch,split,loss,psnr_db,rmse,lr";

inline std::string metric_csv(const std::vector<MetricRow>& rows) {
  std::string out(kMetricHeader);
  out += '\n';
  for (const auto& r : rows)
    out += std::to_string(r.epoch) + "," + r.split + "," + format_metric(r.loss) + "," + format_metric(r.psnr_db) +
           "," + format_metric(r.rmse) + "," + format_metric(r.lr) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Generic loop

struct EvalSummary {
  double loss = 0, psnr_db = 0, rmse = 0;
};

enum class Objective { max_psnr, min_rmse };

struct TrainResult {
  std::vector<MetricRow> log;
  std::string best_checkpoint;  // encoded bytes
  int best_epoch = 0;
  double best_metric = 0;
  long steps = 0;
  bool aborted = false;
  std::string abort_reason;
};

/// Minibatch Adam over `n_samples` examples. `sample_loss` builds the loss of
/// one example on the given tape. Evaluation runs before the first epoch and
/// after every `eval_every` epochs; the best evaluation's parameters are
/// kept as an encoded checkpoint (and written to out_dir/best.ckpt).
template <class T>
TrainResult fit(ParamSet<T>& params, std::size_t n_samples,
                const std::function<ad::Var<T>(ad::Tape<T>&, std::size_t)>& sample_loss,
                const std::function<EvalSummary()>& evaluate, const TrainConfig& cfg, Objective objective,
                std::ostream* progress = nullptr) {
  cfg.validate();
  if (n_samples == 0) throw ParamError("fit: empty training set");
  const bool to_disk = !cfg.out_dir.empty();
  if (to_disk) std::filesystem::create_directories(cfg.out_dir);

  TrainResult res;
  std::vector<double> eval_losses;
  AdamState<T> adam;
  adam.beta1 = cfg.beta1;
  adam.beta2 = cfg.beta2;
  adam.eps = cfg.adam_eps;
  Rng order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), std::size_t{0});

  auto better = [&](double m) {
    return objective == Objective::max_psnr ? m > res.best_metric : m < res.best_metric;
  };
  auto record_eval = [&](int epoch, double lr) {
    const auto e = evaluate();
    res.log.push_back({epoch, "eval", e.loss, e.psnr_db, e.rmse, lr});
    eval_losses.push_back(e.loss);
    const double metric = objective == Objective::max_psnr ? e.psnr_db : e.rmse;
    if (res.best_checkpoint.empty() || better(metric)) {
      res.best_metric = metric;
      res.best_epoch = epoch;
      res.best_checkpoint = encode_checkpoint(params);
      if (to_disk) detail::write_file(cfg.out_dir / "best.ckpt", res.best_checkpoint);
    }
    if (progress)
      *progress << "epoch " << epoch << " eval loss " << format_metric(e.loss) << " psnr " << format_metric(e.psnr_db)
                << " rmse " << format_metric(e.rmse) << " lr " << format_metric(lr) << "\n";
  };

  record_eval(0, schedule_lr(cfg, 0, eval_losses));
  for (int epoch = 1; epoch <= cfg.epochs && !res.aborted; ++epoch) {
    if (cfg.max_steps && res.steps >= cfg.max_steps) break;
    const double lr = schedule_lr(cfg, epoch - 1, eval_losses);
    order_rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < n_samples; b += cfg.batch) {
      if (cfg.max_steps && res.steps >= cfg.max_steps) break;
      const std::size_t e = std::min(n_samples, b + cfg.batch);
      params.zero_grad();
      double batch_loss = 0;
      for (std::size_t k = b; k < e; ++k) {
        ad::Tape<T> tape;
        auto loss = sample_loss(tape, order[k]);
        batch_loss += loss->value[0];
        tape.backward(loss);
      }
      if (!std::isfinite(batch_loss)) {
        res.aborted = true;
        res.abort_reason = "non-finite loss at step " + std::to_string(res.steps + 1);
        break;
      }
      const T inv = T{1} / static_cast<T>(e - b);
      for (const auto& p : params.vars())
        for (auto& g : p->grad_buf().data()) g *= inv;
      try {
        adam_step(params.vars(), adam, lr);
      } catch (const NumericError& ex) {
        res.aborted = true;
        res.abort_reason = ex.what();
        break;
      }
      ++res.steps;
      epoch_loss += batch_loss;
      seen += e - b;
    }
    if (seen) {
      const double l = epoch_loss / static_cast<double>(seen);
      res.log.push_back({epoch, "train", l, psnr_from_mse(l, 1.0), std::sqrt(l), lr});
    }
    if (res.aborted) break;
    const bool last = epoch == cfg.epochs || (cfg.max_steps && res.steps >= cfg.max_steps);
    if (epoch % cfg.eval_every == 0 || last) record_eval(epoch, lr);
    if (to_disk && cfg.checkpoint_every && epoch % cfg.checkpoint_every == 0)
      save_checkpoint(cfg.out_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"), params);
  }
  if (to_disk) {
    std::ofstream(cfg.out_dir / "metrics.csv", std::ios::binary | std::ios::trunc) << metric_csv(res.log);
  }
  if (res.aborted && progress) *progress << "training aborted: " << res.abort_reason << "\n";
  return res;
}

// ---------------------------------------------------------------------------
// Super-resolution

struct ImageScore {
  std::string name;
  double psnr_db = 0, rmse = 0;
};

/// Luminance HR images in [0, 1].
template <class T>
struct SisrDataset {
  std::vector<Tensor<T>> train, eval;
  std::vector<std::string> eval_names;
};

/// Scores a predicted HR luminance map against ground truth on [0, 1] after
/// removing a `scale`-pixel border.
template <class T>
ImageScore score_sisr(const Tensor<T>& pred, const Tensor<T>& gt, int scale) {
  Tensor<T> p = pred;
  for (auto& v : p.data()) v = std::clamp(v, T{0}, T{1});
  const auto s = static_cast<std::size_t>(scale);
  const double m = mse(shave(p, s), shave(gt, s));
  return {{}, psnr_from_mse(m, 1.0), std::sqrt(m)};
}

template <class T>
std::vector<ImageScore> eval_sisr(const SisrModel<T>& model, const std::vector<Tensor<T>>& images) {
  std::vector<ImageScore> out;
  const int s = model.spec().upsample_factor;
  for (const auto& img : images) {
    const auto hr = modcrop(img, static_cast<std::size_t>(s));
    out.push_back(score_sisr(model.predict(make_lr(hr, s)), hr, s));
  }
  return out;
}

template <class T>
std::vector<ImageScore> eval_bicubic(const std::vector<Tensor<T>>& images, int scale) {
  std::vector<ImageScore> out;
  for (const auto& img : images) {
    const auto hr = modcrop(img, static_cast<std::size_t>(scale));
    out.push_back(score_sisr(bicubic_resize(make_lr(hr, scale), hr.dim(1), hr.dim(2)), hr, scale));
  }
  return out;
}

inline EvalSummary mean_scores(const std::vector<ImageScore>& s) {
  EvalSummary e;
  for (const auto& x : s) {
    e.psnr_db += x.psnr_db;
    e.rmse += x.rmse;
    e.loss += x.rmse * x.rmse;
  }
  const double n = static_cast<double>(std::max<std::size_t>(s.size(), 1));
  e.psnr_db /= n;
  e.rmse /= n;
  e.loss /= n;
  return e;
}

/// Builds the patch pool (with augmentation when enabled) for a scale.
template <class T>
std::vector<PatchPair<T>> sisr_patches(const std::vector<Tensor<T>>& images, int scale, const TrainConfig& cfg) {
  const int m = cfg.patch ? cfg.patch : default_patch(scale);
  const int stride = cfg.patch_stride ? cfg.patch_stride : std::max(1, m / 2);
  std::vector<PatchPair<T>> pool;
  for (const auto& img : images) {
    const auto variants = cfg.augment ? augment(img, cfg.augment_compose) : std::vector<Tensor<T>>{img};
    for (const auto& v : variants)
      for (auto& p : extract_patches(v, scale, m, stride)) pool.push_back(std::move(p));
  }
  return pool;
}

template <class T>
TrainResult train_sisr(SisrModel<T>& model, const SisrDataset<T>& data, const TrainConfig& cfg,
                       std::ostream* progress = nullptr) {
  const auto pool = sisr_patches(data.train, model.spec().upsample_factor, cfg);
  if (pool.empty()) throw ParamError("train_sisr: no training patches (images smaller than one patch?)");
  auto loss = [&](ad::Tape<T>& t, std::size_t i) {
    return ad::mse_loss(t, model.forward(t, ad::leaf(pool[i].lr)), pool[i].hr);
  };
  auto evaluate = [&] { return mean_scores(eval_sisr(model, data.eval)); };
  return fit<T>(model.params(), pool.size(), loss, evaluate, cfg, Objective::max_psnr, progress);
}

// ---------------------------------------------------------------------------
// Guided depth upsampling

/// Depth normalized to [0, 1] by `depth_scale`; guide RGB in [0, 1].
template <class T>
struct JointSample {
  Tensor<T> depth;  // 1 x H x W
  Tensor<T> guide;  // 3 x H x W
};

template <class T>
struct JointDataset {
  std::vector<JointSample<T>> train, eval;
  std::vector<std::string> eval_names;
  double depth_scale = 1.0;  // stored units per normalized unit
};

/// RMSE reported in stored depth units.
template <class T>
std::vector<ImageScore> eval_joint(const JointModel<T>& model, const JointDataset<T>& data) {
  std::vector<ImageScore> out;
  const int M = model.spec().upsample_factor;
  for (const auto& s : data.eval) {
    const auto gt = modcrop(s.depth, static_cast<std::size_t>(M));
    const auto guide = modcrop(s.guide, static_cast<std::size_t>(M));
    const auto pred = model.predict(depth_grid_sample(gt, M, nullptr), guide);
    const double m = mse(pred, gt);
    out.push_back({{}, psnr_from_mse(m, 1.0), std::sqrt(m) * data.depth_scale});
  }
  return out;
}

/// Grid-aligned cubic interpolation of the sampled depth.
template <class T>
std::vector<ImageScore> eval_joint_bicubic(const JointDataset<T>& data, int M) {
  std::vector<ImageScore> out;
  for (const auto& s : data.eval) {
    const auto gt = modcrop(s.depth, static_cast<std::size_t>(M));
    const auto pred = bicubic_upsample_aligned(depth_grid_sample(gt, M, nullptr), M);
    const double m = mse(pred, gt);
    out.push_back({{}, psnr_from_mse(m, 1.0), std::sqrt(m) * data.depth_scale});
  }
  return out;
}

inline EvalSummary mean_joint_scores(const std::vector<ImageScore>& s, double depth_scale) {
  EvalSummary e = mean_scores(s);
  e.loss /= depth_scale * depth_scale;
  return e;
}

template <class T>
struct JointPatch {
  Tensor<T> depth_lr, guide, depth_hr;
};

/// HR crops of side `m` (a multiple of M) on a `stride` grid.
template <class T>
std::vector<JointPatch<T>> joint_patches(const std::vector<JointSample<T>>& samples, int M, int m, int stride) {
  if (m % M || stride % M) throw ParamError("joint patches must be multiples of the upsampling factor");
  const auto mm = static_cast<std::size_t>(m), st = static_cast<std::size_t>(stride);
  std::vector<JointPatch<T>> out;
  for (const auto& s : samples) {
    for (std::size_t i = 0; i + mm <= s.depth.dim(1); i += st)
      for (std::size_t j = 0; j + mm <= s.depth.dim(2); j += st) {
        auto d = crop(s.depth, i, j, mm, mm);
        out.push_back({depth_grid_sample(d, M, nullptr), crop(s.guide, i, j, mm, mm), std::move(d)});
      }
  }
  return out;
}

template <class T>
TrainResult train_joint(JointModel<T>& model, const JointDataset<T>& data, const TrainConfig& cfg,
                        std::ostream* progress = nullptr) {
  const int M = model.spec().upsample_factor;
  const int m = cfg.patch ? cfg.patch : 32;
  const int stride = cfg.patch_stride ? cfg.patch_stride : m / 2;
  const auto pool = joint_patches(data.train, M, m, stride);
  if (pool.empty()) throw ParamError("train_joint: no training patches");
  auto loss = [&](ad::Tape<T>& t, std::size_t i) {
    return ad::mse_loss(t, model.forward(t, ad::leaf(pool[i].depth_lr), ad::leaf(pool[i].guide)), pool[i].depth_hr);
  };
  auto evaluate = [&] { return mean_joint_scores(eval_joint(model, data), data.depth_scale); };
  return fit<T>(model.params(), pool.size(), loss, evaluate, cfg, Objective::min_rmse, progress);
}

}  // namespace atup
