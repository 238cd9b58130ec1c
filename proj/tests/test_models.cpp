#include <gtest/gtest.h>

#include <filesystem>

#include "atup/models.hpp"
#include "oracles.hpp"

using namespace atup;

TEST(Downsample, Examples) {
  const Tensor<double> x({1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(downsample(x, 2).storage(), std::vector<double>{2.5});
  EXPECT_EQ(downsample(x, 1).storage(), x.storage());
  const auto flat = downsample(Tensor<double>({2, 6, 4}, 0.3), 2);
  for (double v : flat.data()) EXPECT_DOUBLE_EQ(v, 0.3);
  EXPECT_THROW(downsample(Tensor<double>({1, 5, 4}), 2), ShapeError);
  Rng rng(1);
  const auto r = uniform_tensor<double>({3, 8, 12}, -1, 1, rng);
  EXPECT_LT(max_abs_diff(downsample(r, 4), oracle::avg_pool(r, 4)), 1e-15);
}

TEST(ParamSet, NamesAreUniqueAndLookedUp) {
  ParamSet<float> ps;
  ps.add("a", Tensor<float>({2, 3}));
  EXPECT_THROW(ps.add("a", Tensor<float>({1})), ParamError);
  EXPECT_THROW(ps["b"], ParamError);
  EXPECT_EQ(ps.num_params(), 6u);
  EXPECT_EQ(ps["a"]->value.shape(), (Shape{2, 3}));
}

TEST(Sisr, OutputShapes) {
  Rng rng(2);
  for (int k : {1, 2, 3})
    for (auto kind : {BlockKind::attention, BlockKind::deconv}) {
      SisrSpec s;
      s.upsample_factor = 1 << k;
      s.features = 4;
      s.block = kind;
      SisrModel<float> m(s, 3);
      for (auto [h, w] : {std::pair<std::size_t, std::size_t>{5, 5}, {6, 9}}) {
        const auto y = m.predict(uniform_tensor<float>({1, h, w}, 0, 1, rng));
        EXPECT_EQ(y.shape(), (Shape{1, h << k, w << k}));
      }
    }
}

TEST(Sisr, ZeroNetworkGivesPixelMean) {
  Rng rng(3);
  const auto x = uniform_tensor<double>({1, 6, 6}, 0, 1, rng);
  for (double mean : {0.0, 0.5}) {
    SisrSpec s;
    s.features = 4;
    s.pixel_mean = mean;
    SisrModel<double> m(s, 1);
    for (const auto& p : m.params().vars()) p->value.fill(0);
    const auto y = m.predict(x);
    EXPECT_EQ(y.shape(), (Shape{1, 12, 12}));
    for (double v : y.data()) EXPECT_EQ(v, mean);
  }
}

TEST(Sisr, ResidualBlockIsIdentityWhenZeroed) {
  // With zero residual weights the network reduces to stem -> upsample -> final.
  SisrSpec s;
  s.features = 4;
  s.block = BlockKind::deconv;
  s.pixel_mean = 0;
  SisrModel<double> m(s, 4);
  m.params()["block0.res1.w"]->value.fill(0);
  m.params()["block0.res2.w"]->value.fill(0);
  Rng rng(5);
  const auto x = uniform_tensor<double>({1, 5, 5}, 0, 1, rng);
  auto h = oracle::conv2d(x, m.params()["stem.w"]->value);
  const auto& a = m.params()["stem.prelu"]->value;
  for (std::size_t c = 0; c < h.dim(0); ++c)
    for (std::size_t i = 0; i < 25; ++i) {
      double& v = h[c * 25 + i];
      if (v < 0) v *= a[c];
    }
  h = oracle::conv2d(oracle::zero_upsample(h, 2), m.params()["block0.up.w"]->value);
  const auto want = oracle::conv2d(h, m.params()["final.w"]->value);
  EXPECT_LT(max_abs_diff(m.predict(x), want), 1e-13);
}

TEST(Sisr, AttentionVariantMatchesTranscription) {
  SisrSpec s;
  s.features = 4;
  SisrModel<double> m(s, 6);
  auto P = [&](const char* n) { return m.params()[n]->value; };
  Rng rng(7);
  const auto x = uniform_tensor<double>({1, 6, 5}, 0, 1, rng);
  auto centred = x;
  for (auto& v : centred.data()) v -= s.pixel_mean;
  auto h = oracle::conv2d(centred, P("stem.w"));
  for (std::size_t i = 0; i < h.size(); ++i)
    if (h[i] < 0) h[i] *= P("stem.prelu")[i / 30];
  const auto r = oracle::conv2d(oracle::relu(oracle::conv2d(h, P("block0.res1.w"))), P("block0.res2.w"));
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += r[i];
  h = oracle::attention_upsample(h, P("block0.up.w_q"), P("block0.up.w_k"), P("block0.up.w_v"), P("block0.up.pos_x"),
                                 P("block0.up.pos_y"), 3, 2, true);
  auto want = oracle::conv2d(h, P("final.w"));
  for (auto& v : want.data()) v += s.pixel_mean;
  EXPECT_LT(max_abs_diff(m.predict(x), want), 1e-12);
}

TEST(Sisr, SwappingBlockKindOnlyChangesUpsamplers) {
  for (int f : {2, 4, 8}) {
    SisrSpec a;
    a.upsample_factor = f;
    SisrSpec d = a;
    d.block = BlockKind::deconv;
    SisrModel<float> ma(a, 0), md(d, 0);
    std::size_t shared = 0;
    for (const auto& v : ma.params().vars()) {
      if (v->name.find(".up.") != std::string::npos) continue;
      ASSERT_TRUE(md.params().contains(v->name)) << v->name;
      EXPECT_EQ(md.params()[v->name]->value.shape(), v->value.shape());
      ++shared;
    }
    for (const auto& v : md.params().vars())
      if (v->name.find(".up.") == std::string::npos) --shared;
    EXPECT_EQ(shared, 0u);
    EXPECT_LT(ma.params().num_params(), md.params().num_params());
  }
}

TEST(Sisr, RejectsBadSpecs) {
  SisrSpec s;
  s.upsample_factor = 3;
  EXPECT_THROW(SisrModel<float>(s, 0), ParamError);
  s.upsample_factor = 2;
  s.features = 5;
  EXPECT_THROW(SisrModel<float>(s, 0), ParamError);
}

namespace {

JointSpec tiny_joint(int M) {
  JointSpec s;
  s.upsample_factor = M;
  s.tg_channels = {6, 4};
  s.tg_kernels = {3, 1};
  s.f_channels = {4};
  s.f_kernels = {3, 3};
  s.m_channels = {8};
  s.m_kernels = {3};
  return s;
}

}  // namespace

TEST(Joint, PresetWidths) {
  const auto s = JointSpec::preset("SA_M1_F8");
  EXPECT_EQ(s.tg_channels, (std::vector<std::size_t>{96, 48, 8}));
  EXPECT_EQ(s.f_channels, (std::vector<std::size_t>{16, 16}));
  EXPECT_EQ(s.m_channels, (std::vector<std::size_t>{16}));
  EXPECT_EQ(JointSpec::preset("SA_M2_F32").m_channels.size(), 2u);
  EXPECT_THROW(JointSpec::preset("SA_M9"), ParamError);
  EXPECT_EQ(s.n_steps(), 2);
}

TEST(Joint, SingleStageShapes) {
  JointModel<float> m(tiny_joint(2), 1);
  JointTrace tr;
  Rng rng(2);
  const auto y = m.predict(uniform_tensor<float>({1, 5, 4}, 0, 1, rng), uniform_tensor<float>({3, 10, 8}, 0, 1, rng),
                           &tr);
  EXPECT_EQ(y.shape(), (Shape{1, 10, 8}));
  ASSERT_EQ(tr.values.size(), 1u);
  EXPECT_EQ(tr.values[0], (Shape{4, 10, 8}));
  EXPECT_EQ(tr.guide_features[0], (Shape{4, 10, 8}));
}

TEST(Joint, StagesVisitDistinctGuideResolutions) {
  for (int M : {4, 8}) {
    JointModel<float> m(tiny_joint(M), 1);
    JointTrace tr;
    Rng rng(3);
    const std::size_t h = 3, w = 2;
    (void)m.predict(uniform_tensor<float>({1, h, w}, 0, 1, rng),
                    uniform_tensor<float>({3, h * M, w * M}, 0, 1, rng), &tr);
    ASSERT_EQ(static_cast<int>(tr.values.size()), m.spec().n_steps());
    for (std::size_t s = 0; s < tr.values.size(); ++s) {
      EXPECT_EQ(tr.guide_features[s][1], tr.values[s][1]);
      EXPECT_EQ(tr.guide_features[s][2], tr.values[s][2]);
      EXPECT_EQ(tr.values[s][1], h << (s + 1));
    }
  }
}

TEST(Joint, MatchesStagewiseTranscription) {
  const auto spec = tiny_joint(4);
  JointModel<double> m(spec, 9);
  auto P = [&](const std::string& n) { return m.params()[n]->value; };
  Rng rng(10);
  const auto target = uniform_tensor<double>({1, 4, 4}, 0, 1, rng);
  const auto guide = uniform_tensor<double>({3, 16, 16}, 0, 1, rng);

  auto cnn = [&](const std::string& name, oracle::T3 x, std::size_t layers, bool relu_last) {
    for (std::size_t l = 0; l < layers; ++l) {
      x = oracle::conv2d(x, P(name + "." + std::to_string(l) + ".w"));
      if (relu_last || l + 1 < layers) x = oracle::relu(x);
    }
    return x;
  };
  const auto y_lr = cnn("t", target, 2, true);
  const auto y_hr = cnn("g", guide, 2, true);
  const std::size_t F = 4, qk = 4;
  auto v = oracle::zero_upsample(y_lr, 2);
  for (int i = 1; i <= 2; ++i) {
    const auto y_ds = oracle::avg_pool(y_hr, static_cast<std::size_t>(4 >> i));
    const auto mo = cnn("m" + std::to_string(i - 1), oracle::stack(v, y_ds), 1, true);
    const auto q = oracle::channels(mo, 0, qk), k = oracle::channels(mo, qk, 2 * qk);
    const std::string a = "attn" + std::to_string(i - 1);
    auto att = oracle::relu(oracle::window_attention(q, k, v, P(a + ".pos_x"), P(a + ".pos_y"), 3, 0.5,
                                                     [](long r, long c) { return r % 2 == 0 && c % 2 == 0; }));
    v = i < 2 ? oracle::zero_upsample(att, 2) : att;
  }
  ASSERT_EQ(v.shape(), (Shape{F, 16, 16}));
  const auto want = cnn("f", v, 2, false);
  EXPECT_LT(max_abs_diff(m.predict(target, guide), want), 1e-12);
}

TEST(Joint, UniformKeysGiveWindowMeans) {
  // Zero CNN_M weights make Q = K = 0: every stage averages its valid values.
  auto spec = tiny_joint(2);
  JointModel<double> m(spec, 11);
  m.params()["m0.0.w"]->value.fill(0);
  m.params()["attn0.pos_x"]->value.fill(0);
  m.params()["attn0.pos_y"]->value.fill(0);
  Rng rng(12);
  const auto target = uniform_tensor<double>({1, 3, 3}, 0, 1, rng);
  const auto guide = uniform_tensor<double>({3, 6, 6}, 0, 1, rng);
  auto v = oracle::relu(oracle::conv2d(target, m.params()["t.0.w"]->value));
  v = oracle::relu(oracle::conv2d(v, m.params()["t.1.w"]->value));
  oracle::T3 att({4, 6, 6});
  for (std::size_t c = 0; c < 4; ++c)
    for (long i = 0; i < 6; ++i)
      for (long j = 0; j < 6; ++j) {
        double s = 0;
        int n = 0;
        for (long a = i - 1; a <= i + 1; ++a)
          for (long b = j - 1; b <= j + 1; ++b)
            if (a >= 0 && b >= 0 && a < 6 && b < 6 && a % 2 == 0 && b % 2 == 0) {
              s += v(c, static_cast<std::size_t>(a / 2), static_cast<std::size_t>(b / 2));
              ++n;
            }
        att(c, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = s / n;
      }
  auto out = oracle::relu(oracle::conv2d(att, m.params()["f.0.w"]->value));
  out = oracle::conv2d(out, m.params()["f.1.w"]->value);
  EXPECT_LT(max_abs_diff(m.predict(target, guide), out), 1e-13);
}

TEST(Joint, ShareFlagReusesCnnM) {
  auto s = tiny_joint(4);
  JointModel<float> unshared(s, 0);
  s.share_m = true;
  JointModel<float> shared(s, 0);
  EXPECT_TRUE(unshared.params().contains("m1.0.w"));
  EXPECT_FALSE(shared.params().contains("m1.0.w"));
  EXPECT_LT(shared.params().num_params(), unshared.params().num_params());
}

TEST(Joint, RejectsMismatchedGuide) {
  JointModel<float> m(tiny_joint(2), 0);
  EXPECT_THROW(m.predict(Tensor<float>({1, 3, 3}), Tensor<float>({3, 7, 6})), ShapeError);
  EXPECT_THROW(m.predict(Tensor<float>({2, 3, 3}), Tensor<float>({3, 6, 6})), ShapeError);
}

TEST(Checkpoint, RoundTripAndLayout) {
  SisrSpec s;
  s.features = 4;
  SisrModel<float> a(s, 1), b(s, 2);
  const auto bytes = encode_checkpoint(a.params());
  EXPECT_EQ(bytes.substr(0, 5), "ATUP1");
  const auto entries = decode_checkpoint(bytes);
  ASSERT_EQ(entries.size(), a.params().size());
  EXPECT_EQ(entries[0].name, "stem.w");

  const auto path = std::filesystem::temp_directory_path() / "atup_test_roundtrip.ckpt";
  save_checkpoint(path, a.params());
  load_checkpoint(path, b.params());
  for (const auto& v : a.params().vars()) EXPECT_EQ(b.params()[v->name]->value.storage(), v->value.storage());

  // header: magic, count, then name length of the first record
  std::uint32_t count = 0, len = 0;
  for (int i = 0; i < 4; ++i) count |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[5 + i])) << (8 * i);
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[9 + i])) << (8 * i);
  EXPECT_EQ(count, a.params().size());
  EXPECT_EQ(len, 6u);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptInputIsRejected) {
  SisrSpec s;
  s.features = 4;
  SisrModel<float> a(s, 1);
  const auto bytes = encode_checkpoint(a.params());
  EXPECT_THROW(decode_checkpoint("ATUP2" + bytes.substr(5)), DecodeError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DecodeError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), DecodeError);

  SisrSpec other = s;
  other.features = 6;
  SisrModel<float> b(other, 1);
  const auto path = std::filesystem::temp_directory_path() / "atup_test_mismatch.ckpt";
  save_checkpoint(path, a.params());
  EXPECT_THROW(load_checkpoint(path, b.params()), DecodeError);
  std::filesystem::remove(path);
}
