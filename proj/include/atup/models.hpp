#pragma once

// Network definitions: the super-resolution network (attention or
// transposed-convolution upsampling blocks) and the guided joint upsampling
// network, plus named parameter sets and the binary checkpoint format.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "atup/autodiff.hpp"

namespace atup {

// ---------------------------------------------------------------------------
// Average pooling

/// Non-overlapping factor x factor mean. factor == 1 is the identity.
template <class T>
Tensor<T> downsample(const Tensor<T>& x, int factor) {
  if (factor < 1) throw ParamError("downsample: factor must be >= 1");
  detail::require_rank(x.shape(), 3, "downsample");
  if (factor == 1) return x;
  const auto f = static_cast<std::size_t>(factor);
  if (x.dim(1) % f || x.dim(2) % f)
    throw ShapeError("downsample: " + to_string(x.shape()) + " not divisible by " + std::to_string(f));
  const std::size_t C = x.dim(0), H = x.dim(1) / f, W = x.dim(2) / f;
  const T inv = T{1} / static_cast<T>(f * f);
  Tensor<T> out({C, H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H * f; ++i)
      for (std::size_t j = 0; j < W * f; ++j) out(c, i / f, j / f) += x(c, i, j);
  for (auto& v : out.data()) v *= inv;
  return out;
}

template <class T>
void downsample_backward(const Tensor<T>& dy, int factor, Tensor<T>& dx) {
  const auto f = static_cast<std::size_t>(factor);
  const T inv = T{1} / static_cast<T>(f * f);
  for (std::size_t c = 0; c < dx.dim(0); ++c)
    for (std::size_t i = 0; i < dx.dim(1); ++i)
      for (std::size_t j = 0; j < dx.dim(2); ++j) dx(c, i, j) += inv * dy(c, i / f, j / f);
}

namespace ad {

template <class T>
Var<T> downsample(Tape<T>& t, const Var<T>& x, int factor) {
  if (factor == 1) return x;
  auto out = t.emit(atup::downsample(x->value, factor), x->requires_grad);
  if (out->requires_grad)
    t.push("downsample", [x, o = out, factor] { downsample_backward(o->grad_buf(), factor, x->grad_buf()); });
  return out;
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Named parameters

/// Ordered, uniquely named set of learnable tensors.
template <class T>
class ParamSet {
 public:
  const ad::Var<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ParamError("duplicate parameter name " + name);
    index_[name] = vars_.size();
    vars_.push_back(ad::param(name, std::move(value)));
    return vars_.back();
  }

  const ad::Var<T>& operator[](const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ParamError("unknown parameter " + name);
    return vars_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<ad::Var<T>>& vars() const noexcept { return vars_; }
  std::size_t size() const noexcept { return vars_.size(); }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& v : vars_) n += v->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& v : vars_) v->zero_grad();
  }

 private:
  std::vector<ad::Var<T>> vars_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

/// Uniform fan-in init; `gain` 2 for layers followed by a rectifier.
template <class T>
Tensor<T> conv_init(std::size_t cout, std::size_t cin, int k, double gain, Rng& rng) {
  const auto ku = static_cast<std::size_t>(k);
  const double b = std::sqrt(3.0 * gain / static_cast<double>(cin * ku * ku));
  return uniform_tensor<T>({cout, cin, ku, ku}, -b, b, rng);
}

inline bool is_pow2(int v) { return v >= 1 && (v & (v - 1)) == 0; }

inline int log2i(int v) { return std::countr_zero(static_cast<unsigned>(v)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Super-resolution network

enum class BlockKind { attention, deconv };

inline std::string to_string(BlockKind k) { return k == BlockKind::attention ? "attention" : "deconv"; }

inline BlockKind parse_block_kind(const std::string& s) {
  if (s == "attention") return BlockKind::attention;
  if (s == "deconv") return BlockKind::deconv;
  throw ParamError("block kind must be attention or deconv, got " + s);
}

struct SisrSpec {
  int upsample_factor = 2;
  std::size_t features = 32;
  BlockKind block = BlockKind::attention;
  int stem_kernel = 5;
  int res_kernel = 3;
  int up_kernel = 3;
  int out_kernel = 3;
  std::size_t out_channels = 1;
  bool scale_logits = true;
  double pixel_mean = 0.5;  // subtracted from the input, added to the output

  int n_blocks() const { return detail::log2i(upsample_factor); }

  void validate() const {
    if (!detail::is_pow2(upsample_factor) || upsample_factor < 2)
      throw ParamError("upsample factor must be a power of two >= 2, got " + std::to_string(upsample_factor));
    if (block == BlockKind::attention && features % 2)
      throw ParamError("attention blocks need an even feature width");
    for (int k : {stem_kernel, res_kernel, up_kernel, out_kernel})
      if (k < 1 || k % 2 == 0) throw ParamError("kernel sizes must be odd");
    if (block == BlockKind::attention && up_kernel < 3) throw ParamError("attention upsampling needs K >= 3");
  }
};

template <class T>
class SisrModel {
 public:
  SisrModel(SisrSpec spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    Rng rng(seed);
    const std::size_t F = spec_.features;
    params_.add("stem.w", detail::conv_init<T>(F, 1, spec_.stem_kernel, 2.0, rng));
    params_.add("stem.prelu", Tensor<T>({F}, T(0.25)));
    for (int b = 0; b < spec_.n_blocks(); ++b) {
      const std::string p = "block" + std::to_string(b);
      params_.add(p + ".res1.w", detail::conv_init<T>(F, F, spec_.res_kernel, 2.0, rng));
      params_.add(p + ".res2.w", detail::conv_init<T>(F, F, spec_.res_kernel, 1.0, rng));
      if (spec_.block == BlockKind::attention) {
        const auto a = AttnUpsampleParams<T>::init(F, F, spec_.up_kernel, 2, rng, spec_.scale_logits);
        params_.add(p + ".up.w_q", a.w_q);
        params_.add(p + ".up.w_k", a.w_k);
        params_.add(p + ".up.w_v", a.w_v);
        params_.add(p + ".up.pos_x", a.pos_x);
        params_.add(p + ".up.pos_y", a.pos_y);
      } else {
        params_.add(p + ".up.w", detail::conv_init<T>(F, F, spec_.up_kernel, 4.0, rng));
      }
    }
    params_.add("final.w", detail::conv_init<T>(spec_.out_channels, F, spec_.out_kernel, 1.0, rng));
  }

  const SisrSpec& spec() const noexcept { return spec_; }
  ParamSet<T>& params() noexcept { return params_; }
  const ParamSet<T>& params() const noexcept { return params_; }

  ad::AttnVars<T> attention_vars(int block) const {
    const std::string p = "block" + std::to_string(block) + ".up";
    return {params_[p + ".w_q"], params_[p + ".w_k"], params_[p + ".w_v"], params_[p + ".pos_x"],
            params_[p + ".pos_y"], spec_.up_kernel, 2, spec_.scale_logits};
  }

  /// 1 x H x W -> out_channels x (f H) x (f W)
  ad::Var<T> forward(ad::Tape<T>& t, const ad::Var<T>& img) const {
    if (img->value.rank() != 3 || img->value.dim(0) != 1)
      throw ShapeError("sisr input must be 1 x H x W, got " + to_string(img->value.shape()));
    const auto mean = static_cast<T>(spec_.pixel_mean);
    auto h = ad::prelu(t, ad::conv2d(t, ad::add_scalar(t, img, -mean), params_["stem.w"]), params_["stem.prelu"]);
    for (int b = 0; b < spec_.n_blocks(); ++b) {
      const std::string p = "block" + std::to_string(b);
      auto r = ad::conv2d(t, ad::relu(t, ad::conv2d(t, h, params_[p + ".res1.w"])), params_[p + ".res2.w"]);
      h = ad::add(t, h, r);
      if (spec_.block == BlockKind::attention)
        h = ad::attention_upsample(t, h, attention_vars(b));
      else
        h = ad::transposed_conv2d(t, h, params_[p + ".up.w"], 2);
    }
    return ad::add_scalar(t, ad::conv2d(t, h, params_["final.w"]), mean);
  }

  Tensor<T> predict(const Tensor<T>& img) const {
    ad::Tape<T> t(false);
    return forward(t, ad::leaf(img))->value;
  }

 private:
  SisrSpec spec_;
  ParamSet<T> params_;
};

// ---------------------------------------------------------------------------
// Guided joint upsampling network

struct JointSpec {
  int upsample_factor = 4;
  std::size_t target_channels = 1;
  std::size_t guide_channels = 3;
  std::vector<std::size_t> tg_channels{96, 48, 8};
  std::vector<int> tg_kernels{5, 1, 3};
  std::vector<std::size_t> f_channels{16, 16};  // a final 1-channel layer is appended
  std::vector<int> f_kernels{3, 1, 3};
  std::vector<std::size_t> m_channels{16};
  std::vector<int> m_kernels{3};
  int attn_kernel = 3;
  bool share_m = false;
  bool scale_logits = true;

  int n_steps() const { return detail::log2i(upsample_factor); }
  std::size_t feature_channels() const { return tg_channels.back(); }
  std::size_t qk_channels() const { return m_channels.back() / 2; }

  /// Named widths: SA_M1_F8, SA_M1_F16, SA_M1_F32, SA_M2_F32.
  static JointSpec preset(const std::string& name, int factor = 4) {
    JointSpec s;
    s.upsample_factor = factor;
    if (name == "SA_M1_F8") {
      s.tg_channels = {96, 48, 8};
      s.f_channels = {16, 16};
      s.m_channels = {16};
    } else if (name == "SA_M1_F16") {
      s.tg_channels = {96, 48, 16};
      s.f_channels = {32, 32};
      s.m_channels = {32};
    } else if (name == "SA_M1_F32") {
      s.tg_channels = {96, 48, 32};
      s.f_channels = {64, 64};
      s.m_channels = {64};
    } else if (name == "SA_M2_F32") {
      s.tg_channels = {96, 48, 32};
      s.f_channels = {64, 64};
      s.m_channels = {64, 64};
    } else {
      throw ParamError("unknown joint preset " + name);
    }
    s.m_kernels.assign(s.m_channels.size(), 3);
    return s;
  }

  void validate() const {
    if (!detail::is_pow2(upsample_factor) || upsample_factor < 2)
      throw ParamError("joint upsample factor must be a power of two >= 2");
    if (tg_channels.empty() || tg_kernels.size() != tg_channels.size())
      throw ParamError("CNN_T/G needs one kernel per layer");
    if (f_kernels.size() != f_channels.size() + 1) throw ParamError("CNN_F needs one kernel per layer plus the output");
    if (m_channels.empty() || m_kernels.size() != m_channels.size())
      throw ParamError("CNN_M needs one kernel per layer");
    if (m_channels.back() % 4) throw ParamError("CNN_M output must split into two even halves");
    for (const auto* ks : {&tg_kernels, &f_kernels, &m_kernels})
      for (int k : *ks)
        if (k < 1 || k % 2 == 0) throw ParamError("kernel sizes must be odd");
    if (attn_kernel < 3 || attn_kernel % 2 == 0) throw ParamError("attention kernel must be odd and >= 3");
  }
};

/// Shapes seen by each upsampling stage of the joint network.
struct JointTrace {
  std::vector<Shape> guide_features;  // downsampled Y_HR per stage
  std::vector<Shape> values;          // zero-upsampled value map per stage
};

template <class T>
class JointModel {
 public:
  JointModel(JointSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng(seed);
    add_cnn("t", spec_.target_channels, spec_.tg_channels, spec_.tg_kernels, true, rng);
    add_cnn("g", spec_.guide_channels, spec_.tg_channels, spec_.tg_kernels, true, rng);
    const std::size_t Fv = spec_.feature_channels(), half = spec_.qk_channels() / 2;
    const double bp = 1.0 / std::sqrt(static_cast<double>(spec_.qk_channels()));
    const auto K = static_cast<std::size_t>(spec_.attn_kernel);
    for (int s = 0; s < spec_.n_steps(); ++s) {
      if (s == 0 || !spec_.share_m) add_cnn(m_prefix(s), 2 * Fv, spec_.m_channels, spec_.m_kernels, true, rng);
      params_.add(a_prefix(s) + ".pos_x", uniform_tensor<T>({K, half}, -bp, bp, rng));
      params_.add(a_prefix(s) + ".pos_y", uniform_tensor<T>({K, half}, -bp, bp, rng));
    }
    auto fch = spec_.f_channels;
    fch.push_back(spec_.target_channels);
    add_cnn("f", Fv, fch, spec_.f_kernels, false, rng);
  }

  const JointSpec& spec() const noexcept { return spec_; }
  ParamSet<T>& params() noexcept { return params_; }
  const ParamSet<T>& params() const noexcept { return params_; }

  ad::Var<T> forward(ad::Tape<T>& t, const ad::Var<T>& target_lr, const ad::Var<T>& guide_hr,
                     JointTrace* trace = nullptr) const {
    const auto& X = target_lr->value;
    const auto& G = guide_hr->value;
    const auto M = static_cast<std::size_t>(spec_.upsample_factor);
    if (X.rank() != 3 || G.rank() != 3 || X.dim(0) != spec_.target_channels || G.dim(0) != spec_.guide_channels)
      throw ShapeError("joint model: bad channel counts " + to_string(X.shape()) + ", " + to_string(G.shape()));
    if (G.dim(1) != M * X.dim(1) || G.dim(2) != M * X.dim(2))
      throw ShapeError("joint model: guide " + to_string(G.shape()) + " is not " + std::to_string(M) + "x target " +
                       to_string(X.shape()));
    auto y_lr = run_cnn(t, "t", target_lr, spec_.tg_channels.size(), true);
    auto y_hr = run_cnn(t, "g", guide_hr, spec_.tg_channels.size(), true);
    auto v = y_lr;  // value map at the pre-upsampling resolution
    const std::size_t qk = spec_.qk_channels();
    for (int s = 0; s < spec_.n_steps(); ++s) {
      const int f = spec_.upsample_factor >> (s + 1);
      auto y_ds = ad::downsample(t, y_hr, f);
      auto v_up = ad::zero_upsample(t, v, 2);
      if (trace) {
        trace->guide_features.push_back(y_ds->value.shape());
        trace->values.push_back(v_up->value.shape());
      }
      const std::string m = spec_.share_m ? m_prefix(0) : m_prefix(s);
      auto mo = run_cnn(t, m, ad::concat(t, v_up, y_ds), spec_.m_channels.size(), true);
      auto q = ad::slice_channels(t, mo, 0, qk);
      auto k = ad::grid_pick(t, ad::slice_channels(t, mo, qk, 2 * qk), 2);
      const T scale = spec_.scale_logits ? static_cast<T>(1.0 / std::sqrt(static_cast<double>(qk))) : T{1};
      v = ad::relu(t, ad::masked_attention(t, q, k, v, params_[a_prefix(s) + ".pos_x"],
                                           params_[a_prefix(s) + ".pos_y"], 2, spec_.attn_kernel, scale));
    }
    return run_cnn(t, "f", v, spec_.f_channels.size() + 1, false);
  }

  Tensor<T> predict(const Tensor<T>& target_lr, const Tensor<T>& guide_hr, JointTrace* trace = nullptr) const {
    ad::Tape<T> t(false);
    return forward(t, ad::leaf(target_lr), ad::leaf(guide_hr), trace)->value;
  }

 private:
  static std::string m_prefix(int s) { return "m" + std::to_string(s); }
  static std::string a_prefix(int s) { return "attn" + std::to_string(s); }

  void add_cnn(const std::string& name, std::size_t cin, const std::vector<std::size_t>& widths,
               const std::vector<int>& kernels, bool relu_last, Rng& rng) {
    for (std::size_t l = 0; l < widths.size(); ++l) {
      const bool rectified = relu_last || l + 1 < widths.size();
      params_.add(name + "." + std::to_string(l) + ".w",
                  detail::conv_init<T>(widths[l], cin, kernels[l], rectified ? 2.0 : 1.0, rng));
      cin = widths[l];
    }
  }

  ad::Var<T> run_cnn(ad::Tape<T>& t, const std::string& name, ad::Var<T> x, std::size_t layers,
                     bool relu_last) const {
    for (std::size_t l = 0; l < layers; ++l) {
      x = ad::conv2d(t, x, params_[name + "." + std::to_string(l) + ".w"]);
      if (relu_last || l + 1 < layers) x = ad::relu(t, x);
    }
    return x;
  }

  JointSpec spec_;
  ParamSet<T> params_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian: "ATUP1", u32 count, then per parameter u32 name length,
// name bytes, u32 rank, u32 dims[rank]; then every parameter's data as f32
// in the same order.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size())
      throw DecodeError(std::string("checkpoint truncated reading ") + what + " at byte " + std::to_string(pos_));
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace detail

inline constexpr std::string_view kCheckpointMagic = "ATUP1";

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

template <class T>
std::string encode_checkpoint(const ParamSet<T>& params) {
  std::string out(kCheckpointMagic);
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& v : params.vars()) {
    detail::put_u32(out, static_cast<std::uint32_t>(v->name.size()));
    out += v->name;
    detail::put_u32(out, static_cast<std::uint32_t>(v->value.rank()));
    for (std::size_t d : v->value.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (const auto& v : params.vars())
    for (T x : v->value.data()) detail::put_f32(out, static_cast<float>(x));
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.take(kCheckpointMagic.size(), "magic") != kCheckpointMagic) throw DecodeError("checkpoint: bad magic at byte 0");
  const std::uint32_t n = r.u32();
  std::vector<std::pair<std::string, Shape>> manifest;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t len = r.u32();
    std::string name(r.take(len, "name"));
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw DecodeError("checkpoint: bad rank at byte " + std::to_string(r.pos() - 4));
    Shape s(rank);
    for (auto& d : s) {
      d = r.u32();
      if (d == 0) throw DecodeError("checkpoint: zero extent at byte " + std::to_string(r.pos() - 4));
    }
    manifest.emplace_back(std::move(name), std::move(s));
  }
  std::vector<NamedTensor> out;
  for (auto& [name, shape] : manifest) {
    Tensor<float> t(shape);
    for (auto& v : t.data()) v = r.f32();
    out.push_back({std::move(name), std::move(t)});
  }
  if (!r.done()) throw DecodeError("checkpoint: trailing bytes at byte " + std::to_string(r.pos()));
  return out;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ParamSet<T>& params) {
  detail::write_file(path, encode_checkpoint(params));
}

/// Loads values into an existing set; names and shapes must match exactly.
template <class T>
void load_checkpoint(const std::filesystem::path& path, ParamSet<T>& params) {
  const auto entries = decode_checkpoint(detail::read_file(path));
  if (entries.size() != params.size())
    throw DecodeError("checkpoint " + path.string() + " holds " + std::to_string(entries.size()) +
                      " parameters, model has " + std::to_string(params.size()));
  for (const auto& e : entries) {
    if (!params.contains(e.name)) throw DecodeError("checkpoint parameter " + e.name + " not in model");
    auto& v = params[e.name];
    if (v->value.shape() != e.value.shape())
      throw DecodeError("checkpoint parameter " + e.name + " has shape " + to_string(e.value.shape()) +
                        ", model expects " + to_string(v->value.shape()));
    v->value = e.value.template cast<T>();
  }
}

}  // namespace atup
