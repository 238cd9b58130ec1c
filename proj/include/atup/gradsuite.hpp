#pragma once

// Finite-difference checks of every differentiable op and of small
// instances of both networks, in 64-bit.

#include <functional>
#include <string>
#include <vector>

#include "atup/autodiff.hpp"
#include "atup/models.hpp"

namespace atup {

struct GradCase {
  std::string name;
  ad::GradReport report;
};

struct GradSuiteOptions {
  std::uint64_t seed = 7;
  double eps = 1e-4;
  double tol = 1e-4;
  std::size_t coords = 200;
};

namespace detail {

/// Loss = sum of squared differences between the graph output and a fixed
/// random target of the same shape.
struct GradHarness {
  const GradSuiteOptions& opt;
  Rng rng;
  std::vector<GradCase> cases;

  ad::Var<double> input(const std::string& name, Shape s, double lo = -1, double hi = 1) {
    return ad::param(name, uniform_tensor<double>(std::move(s), lo, hi, rng));
  }

  void run(const std::string& name, const std::vector<ad::Var<double>>& params,
           const std::function<ad::Var<double>(ad::Tape<double>&)>& graph) {
    ad::Tape<double> probe(false);
    const auto shape = graph(probe)->value.shape();
    const auto target = uniform_tensor<double>(shape, -1, 1, rng);
    auto f = [&](ad::Tape<double>& t) { return ad::sse_loss(t, graph(t), target); };
    cases.push_back({name, ad::finite_diff_check(f, params, opt.eps, opt.tol, opt.coords, rng.next_u64())});
  }
};

}  // namespace detail

inline std::vector<GradCase> gradient_suite(const GradSuiteOptions& opt = {}) {
  detail::GradHarness h{opt, Rng(opt.seed), {}};
  auto& rng = h.rng;

  {
    auto x = h.input("x", {3, 5, 6}), w = h.input("w", {4, 3, 3, 3});
    h.run("conv2d", {x, w}, [&](auto& t) { return ad::conv2d(t, x, w); });
  }
  {
    auto x = h.input("x", {4, 5, 5}), w = h.input("w", {6, 4});
    h.run("conv1x1", {x, w}, [&](auto& t) { return ad::conv1x1(t, x, w); });
  }
  {
    auto x = h.input("x", {3, 4, 4});
    for (auto& v : x->value.data())
      if (std::abs(v) < 0.05) v += 0.1;  // keep clear of the kink
    auto a = h.input("slope", {3}, 0.1, 0.4);
    h.run("relu", {x}, [&](auto& t) { return ad::relu(t, x); });
    h.run("prelu", {x, a}, [&](auto& t) { return ad::prelu(t, x, a); });
  }
  {
    auto a = h.input("a", {2, 4, 5}), b = h.input("b", {3, 4, 5});
    h.run("concat+slice", {a, b}, [&](auto& t) {
      auto c = ad::concat(t, a, b);
      return ad::add(t, ad::slice_channels(t, c, 1, 3), ad::slice_channels(t, c, 3, 5));
    });
  }
  {
    auto x = h.input("x", {2, 3, 4});
    h.run("zero_upsample", {x}, [&](auto& t) { return ad::zero_upsample(t, x, 3); });
    h.run("bilinear_upsample", {x}, [&](auto& t) { return ad::bilinear_upsample(t, x, 2); });
    auto y = h.input("y", {2, 6, 8});
    h.run("grid_pick", {y}, [&](auto& t) { return ad::grid_pick(t, y, 2); });
    h.run("downsample", {y}, [&](auto& t) { return ad::downsample(t, y, 2); });
  }
  {
    auto x = h.input("x", {2, 3, 3}), w = h.input("w", {3, 2, 3, 3});
    h.run("transposed_conv2d", {x, w}, [&](auto& t) { return ad::transposed_conv2d(t, x, w, 2); });
  }
  {
    auto l = h.input("logits", {6});
    std::vector<double> mask{0, -std::numeric_limits<double>::infinity(), 0, 0,
                             -std::numeric_limits<double>::infinity(), 0};
    h.run("softmax_masked", {l}, [&, mask](auto& t) { return ad::softmax_masked(t, l, mask); });
  }
  {
    auto q = h.input("q", {5, 4}), k = h.input("k", {5, 4}), v = h.input("v", {5, 3});
    h.run("scaled_dot_attention", {q, k, v}, [&](auto& t) { return ad::scaled_dot_attention(t, q, k, v); });
  }
  struct AttnCase {
    int s, k;
    std::size_t cin, cout, hh, ww;
  };
  for (const AttnCase c : {AttnCase{2, 3, 2, 4, 3, 3}, AttnCase{1, 3, 3, 4, 4, 5}, AttnCase{4, 7, 2, 4, 2, 3},
                           AttnCase{2, 5, 3, 6, 3, 4}}) {
    auto p = ad::AttnVars<double>::from(AttnUpsampleParams<double>::init(c.cin, c.cout, c.k, c.s, rng), "attn");
    auto x = h.input("x", {c.cin, c.hh, c.ww});
    auto params = p.all();
    params.push_back(x);
    const std::string tag = "S=" + std::to_string(c.s) + ",K=" + std::to_string(c.k);
    if (c.s == 1)
      h.run("attention_conv " + tag, params, [&](auto& t) { return ad::attention_conv(t, x, p); });
    else
      h.run("attention_upsample " + tag, params, [&](auto& t) { return ad::attention_upsample(t, x, p); });
  }
  {
    auto p = ad::AttnVars<double>::from(AttnUpsampleParams<double>::init(3, 2, 4, 3, 2, rng), "attn");
    auto xl = h.input("x_lr", {2, 3, 3}), xh = h.input("x_hr", {3, 6, 6});
    auto params = p.all();
    params.push_back(xl);
    params.push_back(xh);
    h.run("attention_joint_upsample", params, [&](auto& t) { return ad::attention_joint_upsample(t, xl, xh, p); });
  }
  for (auto kind : {BlockKind::attention, BlockKind::deconv}) {
    SisrSpec s;
    s.block = kind;
    s.features = 4;
    SisrModel<double> m(s, rng.next_u64());
    auto img = ad::leaf(uniform_tensor<double>({1, 6, 6}, 0, 1, rng));
    h.run("sisr micro-model (" + to_string(kind) + ")", m.params().vars(),
          [&](auto& t) { return m.forward(t, img); });
  }
  {
    JointSpec s;
    s.upsample_factor = 2;
    s.tg_channels = {6, 4};
    s.tg_kernels = {3, 1};
    s.f_channels = {4};
    s.f_kernels = {3, 3};
    s.m_channels = {8};
    s.m_kernels = {3};
    JointModel<double> m(s, rng.next_u64());
    auto lr = ad::leaf(uniform_tensor<double>({1, 4, 4}, 0, 1, rng));
    auto guide = ad::leaf(uniform_tensor<double>({3, 8, 8}, 0, 1, rng));
    h.run("joint micro-model (one stage)", m.params().vars(), [&](auto& t) { return m.forward(t, lr, guide); });
  }
  return std::move(h.cases);
}

}  // namespace atup
