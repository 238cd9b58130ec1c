#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "atup/reference.hpp"
#include "oracles.hpp"

using namespace atup;

namespace {

AttnUpsampleParams<double> zero_key_params(std::size_t cin, std::size_t cout, int k, int s, Rng& rng) {
  auto p = AttnUpsampleParams<double>::init(cin, cout, k, s, rng);
  p.w_k.fill(0);
  p.pos_x.fill(0);
  p.pos_y.fill(0);
  return p;
}

oracle::T3 oracle_upsample(const Tensor<double>& x, const AttnUpsampleParams<double>& p) {
  return oracle::attention_upsample(x, p.w_q, p.w_k, p.w_v, p.pos_x, p.pos_y, p.kernel_size,
                                    static_cast<std::size_t>(p.stride), p.scale_logits);
}

}  // namespace

TEST(ZeroUpsample, Examples) {
  const Tensor<float> x({1, 2, 2}, {1, 2, 3, 4});
  const auto y = zero_upsample(x, 2);
  const std::vector<float> want{1, 0, 2, 0, 0, 0, 0, 0, 3, 0, 4, 0, 0, 0, 0, 0};
  EXPECT_EQ(y.storage(), want);
  EXPECT_EQ(zero_upsample(x, 1).storage(), x.storage());
  EXPECT_THROW(zero_upsample(x, 0), ParamError);
}

TEST(ZeroUpsample, MatchesIndexingOracleAndKeepsMass) {
  Rng rng(1);
  const auto x = uniform_tensor<double>({3, 4, 5}, -1, 1, rng);
  const auto y = zero_upsample(x, 3);
  EXPECT_EQ(max_abs_diff(y, oracle::zero_upsample(x, 3)), 0.0);
  double a = 0, b = 0;
  for (double v : x.data()) a += std::abs(v);
  for (double v : y.data()) b += std::abs(v);
  EXPECT_DOUBLE_EQ(a, b);
}

TEST(TransposedConv, Examples) {
  Rng rng(2);
  const auto x = uniform_tensor<double>({2, 3, 3}, -1, 1, rng);
  auto p = DeconvParams<double>::init(2, 3, 3, 1, rng);
  EXPECT_EQ(transposed_conv2d(x, p).storage(), conv2d(x, p.w, 1).storage());

  DeconvParams<double> point{Tensor<double>({1, 1, 1, 1}, 2.0), 2, 1};
  const auto x1 = uniform_tensor<double>({1, 3, 4}, -1, 1, rng);
  EXPECT_EQ(transposed_conv2d(x1, point).storage(), (2.0 * zero_upsample(x1, 2)).storage());
}

TEST(TransposedConv, EqualsConvOfZeroUpsampled) {
  Rng rng(3);
  for (int s : {2, 3, 4}) {
    const auto x = uniform_tensor<double>({2, 3, 3}, -1, 1, rng);
    const auto p = DeconvParams<double>::init(2, 3, 3, s, rng);
    const auto y = transposed_conv2d(x, p);
    EXPECT_EQ(y.shape(), (Shape{3, 3u * s, 3u * s}));
    EXPECT_EQ(y.storage(), conv2d(zero_upsample(x, s), p.w, 1).storage());
    EXPECT_LT(max_abs_diff(y, oracle::conv2d(oracle::zero_upsample(x, s), p.w)), 1e-13);
  }
}

TEST(ScaledDotAttention, Examples) {
  Rng rng(4);
  const auto v1 = uniform_tensor<double>({1, 3}, -1, 1, rng);
  EXPECT_LT(max_abs_diff(scaled_dot_attention(uniform_tensor<double>({1, 4}, -1, 1, rng),
                                              uniform_tensor<double>({1, 4}, -1, 1, rng), v1),
                         v1),
            1e-15);

  const auto q = uniform_tensor<double>({5, 4}, -1, 1, rng), v = uniform_tensor<double>({5, 3}, -1, 1, rng);
  const auto y0 = scaled_dot_attention(q, Tensor<double>({5, 4}), v);
  for (std::size_t n = 0; n < 5; ++n)
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0;
      for (std::size_t r = 0; r < 5; ++r) m += v(r, c) / 5;
      EXPECT_NEAR(y0(n, c), m, 1e-14);
    }

  const auto k = uniform_tensor<double>({5, 4}, -1, 1, rng);
  const auto y = scaled_dot_attention(q, k, v);
  for (std::size_t n = 0; n < 5; ++n) {
    std::vector<double> e(5);
    double z = 0;
    for (std::size_t r = 0; r < 5; ++r) {
      double d = 0;
      for (std::size_t c = 0; c < 4; ++c) d += q(n, c) * k(r, c);
      z += e[r] = std::exp(d / 2.0);
    }
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0;
      for (std::size_t r = 0; r < 5; ++r) s += e[r] / z * v(r, c);
      EXPECT_NEAR(y(n, c), s, 1e-14);
    }
  }
}

TEST(RelativeLogit, Examples) {
  Rng rng(5);
  auto p = AttnUpsampleParams<double>::init(4, 4, 3, 2, rng);
  const std::vector<double> q{0.3, -0.2, 0.5, 0.1}, k{1.0, 0.4, -0.7, 0.2}, zero(4, 0.0);
  EXPECT_EQ(relative_logit<double>(zero, k, 1, -1, p), 0.0);

  // offsets: pos_x row dx + r covers the first half, pos_y row dy + r the second
  double want = 0;
  for (std::size_t c = 0; c < 2; ++c) want += q[c] * (k[c] + p.pos_x(2, c));
  for (std::size_t c = 0; c < 2; ++c) want += q[2 + c] * (k[2 + c] + p.pos_y(0, c));
  EXPECT_NEAR(relative_logit<double>(q, k, 1, -1, p), want / 2.0, 1e-15);

  p.pos_x.fill(0);
  p.pos_y.fill(0);
  p.scale_logits = false;
  EXPECT_NEAR(relative_logit<double>(q, k, 0, 0, p), 0.3 - 0.08 - 0.35 + 0.02, 1e-15);
  EXPECT_THROW(relative_logit<double>(q, k, 2, 0, p), ParamError);
}

TEST(AttentionConv, UniformAndSinglePixel) {
  Rng rng(6);
  auto p = zero_key_params(3, 4, 3, 1, rng);
  const auto x = uniform_tensor<double>({3, 5, 6}, -1, 1, rng);
  const auto y = attention_conv(x, p);
  const auto v = oracle::conv1x1(x, p.w_v);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        double s = 0;
        int n = 0;
        for (std::size_t a = i ? i - 1 : 0; a <= std::min<std::size_t>(i + 1, 4); ++a)
          for (std::size_t b = j ? j - 1 : 0; b <= std::min<std::size_t>(j + 1, 5); ++b, ++n) s += v(c, a, b);
        EXPECT_NEAR(y(c, i, j), s / n, 1e-14);
      }

  auto p1 = AttnUpsampleParams<double>::init(3, 4, 3, 1, rng);
  const auto x1 = uniform_tensor<double>({3, 1, 1}, -1, 1, rng);
  EXPECT_LT(max_abs_diff(attention_conv(x1, p1), oracle::conv1x1(x1, p1.w_v)), 1e-15);
}

TEST(AttentionConv, MatchesWindowOracle) {
  Rng rng(7);
  const auto p = AttnUpsampleParams<double>::init(3, 4, 3, 1, rng);
  const auto x = uniform_tensor<double>({3, 6, 6}, -1, 1, rng);
  const auto want = oracle::window_attention(oracle::conv1x1(x, p.w_q), oracle::conv1x1(x, p.w_k),
                                             oracle::conv1x1(x, p.w_v), p.pos_x, p.pos_y, 3, 0.5,
                                             [](long, long) { return true; });
  EXPECT_LT(max_abs_diff(attention_conv(x, p), want), 1e-13);
}

TEST(Mask, Examples) {
  const auto m = make_mask<double>(2, 2, 2);
  EXPECT_EQ(m.grid.shape(), (Shape{4, 4}));
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b) EXPECT_EQ(m.valid(a, b), a % 2 == 0 && b % 2 == 0);
  EXPECT_TRUE(std::ranges::all_of(make_mask<double>(3, 3, 1).grid.data(), [](double v) { return v == 0; }));
  const auto m4 = make_mask<double>(3, 5, 4);
  EXPECT_EQ(std::ranges::count(m4.grid.data(), 0.0), 15);
  EXPECT_TRUE(std::ranges::all_of(m4.grid.data(), [](double v) { return v == 0 || v == -INFINITY; }));
}

TEST(Bilinear, Examples) {
  const Tensor<double> ramp({1, 1, 4}, {0, 1, 2, 3});
  const auto y = bilinear_upsample(ramp, 2);
  const std::vector<double> row{0, 0.5, 1, 1.5, 2, 2.5, 3, 3};
  ASSERT_EQ(y.shape(), (Shape{1, 2, 8}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(y(0, i, j), row[j]);
  Rng rng(8);
  const auto x = uniform_tensor<double>({2, 3, 4}, -1, 1, rng);
  EXPECT_EQ(bilinear_upsample(x, 1).storage(), x.storage());
  const auto c = bilinear_upsample(Tensor<double>({1, 3, 3}, 0.25), 3);
  for (double v : c.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Bilinear, MatchesOracleAndKeepsGridPoints) {
  Rng rng(9);
  for (int s : {2, 3, 4}) {
    const auto x = uniform_tensor<double>({2, 3, 5}, -1, 1, rng);
    const auto y = bilinear_upsample(x, s);
    EXPECT_LT(max_abs_diff(y, oracle::bilinear_upsample(x, static_cast<std::size_t>(s))), 1e-15);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(y(c, s * i, s * j), x(c, i, j));
  }
}

TEST(AttentionUpsample, StrideTwoWindowSupport) {
  Rng rng(10);
  const auto p = zero_key_params(2, 4, 3, 2, rng);
  const auto x = uniform_tensor<double>({2, 3, 3}, -1, 1, rng);
  const auto y = attention_upsample(x, p);
  const auto v = zero_upsample(conv1x1(x, p.w_v), 2);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y(c, 1, 2), (v(c, 0, 2) + v(c, 2, 2)) / 2, 1e-15);
}

TEST(AttentionUpsample, MatchesMaskedWindowOracle) {
  Rng rng(11);
  const auto p = AttnUpsampleParams<double>::init(2, 4, 3, 2, rng);
  const auto x = uniform_tensor<double>({2, 3, 3}, -1, 1, rng);
  EXPECT_LT(max_abs_diff(attention_upsample(x, p), oracle_upsample(x, p)), 1e-13);
}

TEST(AttentionUpsample, RandomMatrixShapesAndOracle) {
  Rng rng(12);
  for (int s : {1, 2, 3, 4})
    for (int k : {3, 5, 7, 9}) {
      if (k < 2 * s - 1) continue;
      const std::size_t c = 2 + 2 * rng.below(3), h = 2 + rng.below(5), w = 2 + rng.below(5);
      auto p = AttnUpsampleParams<double>::init(3, c, k, s, rng, rng.below(2) == 1);
      const auto x = uniform_tensor<double>({3, h, w}, -1, 1, rng);
      const auto y = attention_upsample(x, p);
      ASSERT_EQ(y.shape(), (Shape{c, h * s, w * s}));
      EXPECT_LT(max_abs_diff(y, oracle_upsample(x, p)), 1e-12) << "S=" << s << " K=" << k;
    }
}

TEST(AttentionUpsample, StrideOneEqualsAttentionConv) {
  Rng rng(13);
  for (int k : {3, 5, 7}) {
    const auto p = AttnUpsampleParams<double>::init(3, 4, k, 1, rng);
    const auto x = uniform_tensor<double>({3, 5, 4}, -1, 1, rng);
    EXPECT_LT(max_abs_diff(attention_upsample(x, p), attention_conv(x, p)), 1e-15);
  }
}

TEST(AttentionUpsample, RejectsEmptyWindows) {
  Rng rng(14);
  const auto p = AttnUpsampleParams<double>::init(2, 4, 3, 3, rng);
  EXPECT_THROW(attention_upsample(Tensor<double>({2, 2, 2}), p), EmptyWindowError);
  EXPECT_THROW(AttnUpsampleParams<double>::init(2, 3, 3, 2, rng), ParamError);
}

TEST(AttentionUpsample, ValueChannelPermutationCommutes) {
  Rng rng(15);
  auto p = AttnUpsampleParams<double>::init(3, 6, 5, 2, rng);
  const auto x = uniform_tensor<double>({3, 4, 4}, -1, 1, rng);
  const auto y = attention_upsample(x, p);
  const std::vector<std::size_t> perm{4, 2, 0, 5, 1, 3};
  auto pp = p;
  for (std::size_t o = 0; o < 6; ++o)
    for (std::size_t c = 0; c < 3; ++c) pp.w_v(o, c) = p.w_v(perm[o], c);
  const auto yp = attention_upsample(x, pp);
  for (std::size_t o = 0; o < 6; ++o)
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(yp(o, i, j), y(perm[o], i, j), 1e-14);
}

TEST(AttentionUpsample, CoefficientsSumToOne) {
  // With W_V producing a constant 1 channel the output is the coefficient sum.
  Rng rng(16);
  for (int s : {1, 2, 4})
    for (int k : {3, 5, 7}) {
      if (k < 2 * s - 1) continue;
      auto p = AttnUpsampleParams<double>::init(2, 4, k, s, rng);
      Tensor<double> x({2, 3, 4});
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
          x(0, i, j) = 1;
          x(1, i, j) = rng.uniform(-1, 1);
        }
      p.w_v.fill(0);
      p.w_v(0, 0) = 1;
      const auto y = attention_upsample(x, p);
      for (std::size_t i = 0; i < y.dim(1); ++i)
        for (std::size_t j = 0; j < y.dim(2); ++j) EXPECT_NEAR(y(0, i, j), 1.0, 1e-6);
    }
}

TEST(AttentionJointUpsample, MatchesOracle) {
  Rng rng(17);
  const auto p = AttnUpsampleParams<double>::init(3, 2, 4, 3, 2, rng);
  const auto xl = uniform_tensor<double>({2, 3, 3}, -1, 1, rng);
  const auto xh = uniform_tensor<double>({3, 6, 6}, -1, 1, rng);
  const auto want =
      oracle::attention_joint_upsample(xl, xh, p.w_q, p.w_k, p.w_v, p.pos_x, p.pos_y, 3, 2, p.scale_logits);
  EXPECT_LT(max_abs_diff(attention_joint_upsample(xl, xh, p), want), 1e-13);
  EXPECT_THROW(attention_joint_upsample(xl, Tensor<double>({3, 5, 6}), p), ShapeError);
}

TEST(AttentionJointUpsample, UniformKeysGiveWindowMean) {
  Rng rng(18);
  auto p = AttnUpsampleParams<double>::init(3, 2, 4, 3, 2, rng);
  p.pos_x.fill(0);
  p.pos_y.fill(0);
  const auto xl = uniform_tensor<double>({2, 3, 3}, -1, 1, rng);
  const Tensor<double> xh({3, 6, 6}, 0.5);
  const auto y = attention_joint_upsample(xl, xh, p);
  const auto v = conv1x1(xl, p.w_v);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        double s = 0;
        int n = 0;
        for (long a = static_cast<long>(i) - 1; a <= static_cast<long>(i) + 1; ++a)
          for (long b = static_cast<long>(j) - 1; b <= static_cast<long>(j) + 1; ++b)
            if (a >= 0 && b >= 0 && a < 6 && b < 6 && a % 2 == 0 && b % 2 == 0) {
              s += v(c, static_cast<std::size_t>(a / 2), static_cast<std::size_t>(b / 2));
              ++n;
            }
        EXPECT_NEAR(y(c, i, j), s / n, 1e-14);
      }
}

TEST(AttentionJointUpsample, StrideOneReducesToAttentionConv) {
  Rng rng(19);
  const auto p = AttnUpsampleParams<double>::init(3, 4, 3, 1, rng);
  const auto x = uniform_tensor<double>({3, 4, 5}, -1, 1, rng);
  EXPECT_LT(max_abs_diff(attention_joint_upsample(x, x, p), attention_conv(x, p)), 1e-15);
}

TEST(ParamCounts, FormulasAndEnumeration) {
  EXPECT_EQ(count_params_deconv(64, 64, 3), 36864u);
  EXPECT_EQ(count_params_attention(64, 64, 3), 12480u);
  EXPECT_NEAR(36864.0 / 12480.0, 2.95, 0.01);
  EXPECT_THROW(count_params_attention(1, 1, 3), ParamError);
  Rng rng(20);
  for (std::size_t cin : {2u, 5u, 16u})
    for (std::size_t cout : {2u, 8u, 32u})
      for (int k : {1, 3, 5}) {
        const auto a = AttnUpsampleParams<float>::init(cin, cout, std::max(k, 3), 2, rng);
        const std::size_t enumerated = a.w_q.size() + a.w_k.size() + a.w_v.size() + a.pos_x.size() + a.pos_y.size();
        EXPECT_EQ(count_params_attention(cin, cout, static_cast<std::uint64_t>(std::max(k, 3))), enumerated);
        const auto d = DeconvParams<float>::init(cin, cout, k, 2, rng);
        EXPECT_EQ(count_params_deconv(cin, cout, static_cast<std::uint64_t>(k)), d.w.size());
      }
}
