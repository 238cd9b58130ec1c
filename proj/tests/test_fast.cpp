#include <gtest/gtest.h>

#include <set>
#include <sstream>
#include <tuple>

#include "atup/bench.hpp"
#include "atup/fast.hpp"
#include "atup/reference.hpp"
#include "oracles.hpp"

using namespace atup;

TEST(PhasePlan, GatheredSetEqualsUnmaskedWindow) {
  for (int s : {1, 2, 4})
    for (int k : {3, 5, 7}) {
      if (k < 2 * s - 1) continue;
      const std::size_t H = 3, W = 4;
      const auto plan = PhasePlan::build(s, k, W);
      const auto mask = make_mask<double>(H, W, s);
      const long r = (k - 1) / 2, SH = static_cast<long>(H) * s, SW = static_cast<long>(W) * s;
      for (long i = 0; i < SH; ++i)
        for (long j = 0; j < SW; ++j) {
          std::set<std::pair<long, long>> want, got;
          for (long dx = -r; dx <= r; ++dx)
            for (long dy = -r; dy <= r; ++dy) {
              const long a = i + dx, b = j + dy;
              if (a >= 0 && b >= 0 && a < SH && b < SW &&
                  mask.valid(static_cast<std::size_t>(a), static_cast<std::size_t>(b)))
                want.insert({a, b});
            }
          const auto& taps = plan.phase(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
          EXPECT_GE(taps.size(), 1u);
          for (const auto& t : taps) {
            const long u = i / s + t.du, v = j / s + t.dv;
            if (u < 0 || v < 0 || u >= static_cast<long>(H) || v >= static_cast<long>(W)) continue;
            EXPECT_EQ(u * s, i + t.dx);
            EXPECT_EQ(v * s, j + t.dy);
            got.insert({u * s, v * s});
          }
          EXPECT_EQ(got, want) << "S=" << s << " K=" << k << " at " << i << "," << j;
        }
    }
}

TEST(FastAttention, MatchesReferenceAcrossMatrix) {
  Rng rng(1);
  for (int trial = 0; trial < 60; ++trial) {
    const int s = std::array{1, 2, 4}[rng.below(3)];
    const int k = std::array{3, 5, 7}[rng.below(3)];
    if (k < 2 * s - 1) continue;
    const std::size_t c = std::array<std::size_t, 3>{2, 4, 8}[rng.below(3)];
    const std::size_t h = 3 + rng.below(10), w = 3 + rng.below(10);
    const auto p = AttnUpsampleParams<float>::init(c, c, k, s, rng);
    const auto x = uniform_tensor<float>({c, h, w}, -1, 1, rng);
    const auto fast = attention_upsample_fast(x, p, 1 + static_cast<int>(rng.below(4)));
    const auto exact = oracle::attention_upsample(x.cast<double>(), p.w_q.cast<double>(), p.w_k.cast<double>(),
                                                  p.w_v.cast<double>(), p.pos_x.cast<double>(),
                                                  p.pos_y.cast<double>(), k, static_cast<std::size_t>(s), true);
    EXPECT_LT(max_rel_diff(fast, attention_upsample(x, p), 1e-3), 1e-4);
    EXPECT_LT(max_rel_diff(fast, exact, 1e-3), 1e-4);
  }
}

TEST(FastAttention, DoubleAgreesToRounding) {
  Rng rng(2);
  const auto p = AttnUpsampleParams<double>::init(6, 8, 5, 2, rng);
  const auto x = uniform_tensor<double>({6, 7, 5}, -1, 1, rng);
  EXPECT_LT(max_abs_diff(attention_upsample_fast(x, p, 3), attention_upsample(x, p)), 1e-13);
}

TEST(FastAttention, StrideOneEqualsAttentionConv) {
  Rng rng(3);
  const auto p = AttnUpsampleParams<double>::init(4, 4, 3, 1, rng);
  const auto x = uniform_tensor<double>({4, 6, 7}, -1, 1, rng);
  EXPECT_LT(max_abs_diff(attention_upsample_fast(x, p, 2), attention_conv(x, p)), 1e-13);
}

TEST(FastAttention, JointMatchesReference) {
  Rng rng(4);
  for (int s : {2, 4}) {
    const auto p = AttnUpsampleParams<double>::init(5, 3, 4, 2 * s + 1, s, rng);
    const auto xl = uniform_tensor<double>({3, 4, 3}, -1, 1, rng);
    const auto xh = uniform_tensor<double>({5, 4u * s, 3u * s}, -1, 1, rng);
    EXPECT_LT(max_abs_diff(attention_joint_upsample_fast(xl, xh, p, 2), attention_joint_upsample(xl, xh, p)),
              1e-13);
  }
}

TEST(FastAttention, BitIdenticalAcrossRunsAndThreadCounts) {
  Rng rng(5);
  const auto p = AttnUpsampleParams<float>::init(8, 8, 3, 2, rng);
  const auto x = uniform_tensor<float>({8, 17, 13}, -1, 1, rng);
  const auto a = attention_upsample_fast(x, p, 1);
  EXPECT_EQ(a.storage(), attention_upsample_fast(x, p, 1).storage());
  for (int t : {2, 3, 4, 7}) EXPECT_EQ(a.storage(), attention_upsample_fast(x, p, t).storage()) << t;
}

TEST(FastAttention, RejectsEmptyWindow) {
  Rng rng(6);
  const auto p = AttnUpsampleParams<float>::init(2, 2, 3, 4, rng);
  EXPECT_THROW(attention_upsample_fast(Tensor<float>({2, 3, 3}), p), EmptyWindowError);
}

TEST(FastDeconv, MatchesReference) {
  Rng rng(7);
  for (int s : {1, 2, 3})
    for (int k : {1, 3, 5}) {
      const auto p = DeconvParams<float>::init(3, 4, k, s, rng);
      const auto x = uniform_tensor<float>({3, 5, 6}, -1, 1, rng);
      EXPECT_LT(max_rel_diff(transposed_conv2d_fast(x, p, 2), transposed_conv2d(x, p), 1e-3), 1e-4);
    }
}

TEST(Flops, MatchInstrumentedReference) {
  Rng rng(8);
  for (int s : {1, 2, 3, 4})
    for (int k : {1, 3, 5, 7}) {
      const std::size_t cin = 3, cout = 4, h = 5, w = 4;
      MacCounter dc;
      (void)transposed_conv2d(uniform_tensor<double>({cin, h, w}, -1, 1, rng),
                              DeconvParams<double>::init(cin, cout, k, s, rng), &dc);
      EXPECT_EQ(dc.macs, flops_transposed_conv(cin, cout, h, w, s, k)) << s << "," << k;
      if (k < 2 * s - 1) continue;
      MacCounter ac;
      (void)attention_upsample(uniform_tensor<double>({cin, h, w}, -1, 1, rng),
                               AttnUpsampleParams<double>::init(cin, cout, k, s, rng), &ac);
      EXPECT_EQ(ac.macs, flops_attention_upsample(cin, cout, h, w, s, k)) << s << "," << k;
    }
}

TEST(Flops, DegenerateStrideOneKernelOne) {
  // 3 projections, one logit and one weighted sum per pixel
  const std::uint64_t c = 4, hw = 6 * 5;
  EXPECT_EQ(flops_attention_upsample(c, c, 6, 5, 1, 1), 3 * c * c * hw + 2 * c * hw);
}

TEST(Flops, AttentionToDeconvRatio) {
  const double a = static_cast<double>(flops_attention_upsample(32, 32, 16, 16, 2, 3));
  const double d = static_cast<double>(flops_transposed_conv(32, 32, 16, 16, 2, 3));
  EXPECT_GT(a, 0);
  EXPECT_GT(d, 0);
  // attention spends its work on projections; deconv on dense taps
  EXPECT_LT(a / d, 1.0);
}

TEST(Bench, EmptyGridGivesHeaderOnly) {
  EXPECT_EQ(bench_csv(bench(bench_ops(), {}, 3)), std::string(kBenchHeader) + "\n");
}

TEST(Bench, CardinalityAndFlops) {
  std::vector<BenchShape> grid{{4, 4, 6, 6, 2, 3}, {2, 4, 5, 7, 2, 5}, {4, 2, 4, 4, 1, 3}};
  const auto recs = bench({"attention_fast", "deconv_fast"}, grid, 3, 2);
  ASSERT_EQ(recs.size(), 6u);
  for (const auto& r : recs) {
    EXPECT_EQ(r.check, "ok");
    const auto& s = r.shape;
    const auto want = r.op.starts_with("attention") ? flops_attention_upsample(s.cin, s.cout, s.h, s.w, s.s, s.k)
                                                   : flops_transposed_conv(s.cin, s.cout, s.h, s.w, s.s, s.k);
    EXPECT_EQ(r.flops, want);
  }
  std::istringstream csv(bench_csv(recs));
  std::string line;
  int n = 0;
  while (std::getline(csv, line)) ++n;
  EXPECT_EQ(n, 7);
  EXPECT_THROW(bench({"nope"}, grid, 1), ParamError);
}
