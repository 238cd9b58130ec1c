#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "atup/synth.hpp"
#include "atup/train.hpp"

using namespace atup;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("atup_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  auto x = ad::param("x", Tensor<double>({3}, {1.0, -2.0, 0.5}));
  x->grad_buf() = Tensor<double>({3}, {0.3, -7.0, 1e-3});
  AdamState<double> st;
  adam_step<double>({x}, st, 0.01);
  EXPECT_NEAR(x->value[0], 1.0 - 0.01, 1e-8);
  EXPECT_NEAR(x->value[1], -2.0 + 0.01, 1e-8);
  EXPECT_NEAR(x->value[2], 0.5 - 0.01, 1e-6);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto x = ad::param("x", Tensor<double>({2}, {4.0, -1.0}));
  AdamState<double> st;
  for (int i = 0; i < 5; ++i) adam_step<double>({x}, st, 0.1);
  EXPECT_EQ(x->value.storage(), (std::vector<double>{4.0, -1.0}));
}

TEST(Adam, MatchesScalarRecurrence) {
  // minimise x^2 from x = 1; independent scalar transcription
  auto x = ad::param("x", Tensor<double>({1}, 1.0));
  AdamState<double> st;
  double xr = 1, m = 0, v = 0;
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 10; ++t) {
    x->grad_buf()[0] = 2 * x->value[0];
    adam_step<double>({x}, st, lr);
    const double g = 2 * xr;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    xr -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    EXPECT_NEAR(x->value[0], xr, 1e-12) << t;
  }
  EXPECT_LT(std::abs(xr), 1.0);
}

TEST(Adam, NonFiniteGradientIsReported) {
  auto x = ad::param("w", Tensor<double>({2}));
  x->grad_buf()[1] = std::nan("");
  AdamState<double> st;
  try {
    adam_step<double>({x}, st, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("w at index 1"), std::string::npos);
  }
}

TEST(Schedule, StepDecay) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(schedule_lr(c, 0, {}), 1e-3);
  EXPECT_DOUBLE_EQ(schedule_lr(c, 1199, {}), 1e-3);
  EXPECT_NEAR(schedule_lr(c, 1300, {}), 1e-4, 1e-18);
  EXPECT_NEAR(schedule_lr(c, 1600, {}), 1e-5, 1e-18);
}

TEST(Schedule, PlateauDecaysOncePerPatienceWindow) {
  TrainConfig c;
  c.schedule = ScheduleKind::plateau;
  std::vector<double> flat(static_cast<std::size_t>(3 * c.patience) + 1, 0.5);
  EXPECT_NEAR(schedule_lr(c, 0, flat), 1e-3 * std::pow(0.8, 3), 1e-15);
  std::vector<double> improving;
  for (int i = 0; i < 40; ++i) improving.push_back(1.0 / (i + 1));
  EXPECT_DOUBLE_EQ(schedule_lr(c, 0, improving), 1e-3);
  // improvements below the relative threshold do not reset patience
  std::vector<double> tiny{1.0};
  for (int i = 1; i <= 10; ++i) tiny.push_back(1.0 - 1e-6 * i);
  EXPECT_EQ(plateau_decays(tiny, 10, 1e-4), 1);
}

TEST(Schedule, IsPure) {
  TrainConfig c;
  c.schedule = ScheduleKind::plateau;
  const std::vector<double> h{3, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2};
  EXPECT_EQ(schedule_lr(c, 5, h), schedule_lr(c, 5, h));
  EXPECT_THROW(parse_schedule("cosine"), ParamError);
}

TEST(Augment, VariantSizes) {
  Rng rng(1);
  const auto img = uniform_tensor<float>({1, 100, 50}, 0, 1, rng);
  const auto v = augment(img);
  ASSERT_EQ(v.size(), 8u);
  EXPECT_EQ(v[1].shape(), (Shape{1, 50, 100}));
  EXPECT_EQ(v[2].shape(), (Shape{1, 100, 50}));
  const std::size_t want[] = {90, 80, 70, 60};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(v[4 + i].dim(1), want[i]);
    EXPECT_EQ(v[4 + i].dim(2), want[i] / 2);
  }
  EXPECT_EQ(augment(img, true).size(), 20u);
}

TEST(Augment, FourQuarterTurnsAreIdentity) {
  Rng rng(2);
  const auto x = uniform_tensor<double>({2, 5, 7}, 0, 1, rng);
  EXPECT_EQ(rotate90(rotate90(rotate90(rotate90(x)))).storage(), x.storage());
  const auto r = rotate90(x);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(r(1, i, j), x(1, j, 6 - i));
}

TEST(Patches, CountsAndAlignment) {
  Rng rng(3);
  EXPECT_EQ(extract_patches(uniform_tensor<float>({1, 64, 64}, 0, 1, rng), 2, 32, 16).size(), 1u);
  EXPECT_EQ(extract_patches(uniform_tensor<float>({1, 62, 64}, 0, 1, rng), 2, 32, 16).size(), 0u);
  const auto img = uniform_tensor<float>({1, 96, 130}, 0, 1, rng);
  const auto ps = extract_patches(img, 2, 16, 8);
  // LR 48 x 65: 5 rows by 7 columns
  ASSERT_EQ(ps.size(), 35u);
  const auto& last = ps.back();
  EXPECT_EQ(last.lr.shape(), (Shape{1, 16, 16}));
  EXPECT_EQ(last.hr.shape(), (Shape{1, 32, 32}));
  EXPECT_EQ(last.hr(0, 0, 0), img(0, 64, 96));
  EXPECT_EQ(last.hr(0, 31, 31), img(0, 95, 127));
}

TEST(Metrics, PsnrAndRmseExamples) {
  const Tensor<double> a({1, 2, 2}, {0, 0, 0, 0}), b({1, 2, 2}, {0.1, 0.1, 0.1, 0.1});
  EXPECT_NEAR(psnr(a, b, 1.0), 20.0, 1e-12);
  EXPECT_NEAR(rmse(a, b), 0.1, 1e-15);
  EXPECT_TRUE(std::isinf(psnr(a, a, 1.0)));
  EXPECT_EQ(mse(a, a), 0.0);
  EXPECT_GT(mse(a, b), 0.0);
}

TEST(Metrics, PsnrDecreasesWithMse) {
  double prev = std::numeric_limits<double>::infinity();
  for (double m = 1e-8; m < 10; m *= 1.37) {
    const double p = psnr_from_mse(m, 255.0);
    EXPECT_LT(p, prev);
    prev = p;
  }
}

TEST(DepthSample, AnchorsTopLeftAndWarnsOnCrop) {
  Tensor<float> d({1, 6, 8});
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(i);
  std::ostringstream warn;
  const auto s = depth_grid_sample(d, 2, &warn);
  EXPECT_EQ(s.shape(), (Shape{1, 3, 4}));
  EXPECT_EQ(s(0, 1, 2), d(0, 2, 4));
  EXPECT_TRUE(warn.str().empty());
  const auto c = depth_grid_sample(d, 4, &warn);
  EXPECT_EQ(c.shape(), (Shape{1, 1, 2}));
  EXPECT_NE(warn.str().find("warning"), std::string::npos);
}

namespace {

SisrDataset<float> tiny_sisr(std::uint64_t seed, int n_train = 2) {
  Rng rng(seed);
  SisrDataset<float> d;
  for (int i = 0; i < n_train; ++i) d.train.push_back(rgb_to_y<float>(synth::natural_like(40, 40, rng)));
  d.eval.push_back(rgb_to_y<float>(synth::natural_like(24, 24, rng)));
  d.eval_names.push_back("e0");
  return d;
}

SisrSpec tiny_spec(BlockKind kind = BlockKind::attention) {
  SisrSpec s;
  s.features = 4;
  s.block = kind;
  return s;
}

}  // namespace

TEST(Fit, ZeroEpochsKeepsInitialisation) {
  SisrModel<float> m(tiny_spec(), 3);
  const auto init = encode_checkpoint(m.params());
  TrainConfig c;
  c.epochs = 0;
  c.patch = 8;
  c.out_dir = scratch("zero_epochs");
  const auto r = train_sisr(m, tiny_sisr(1), c);
  EXPECT_EQ(r.steps, 0);
  EXPECT_EQ(r.best_checkpoint, init);
  std::ifstream f(c.out_dir / "best.ckpt", std::ios::binary);
  const std::string disk((std::istreambuf_iterator<char>(f)), {});
  EXPECT_EQ(disk, init);
  std::filesystem::remove_all(c.out_dir);
}

TEST(Fit, SameSeedGivesIdenticalLogsAndWeights) {
  auto run = [] {
    SisrModel<float> m(tiny_spec(), 5);
    TrainConfig c;
    c.epochs = 2;
    c.batch = 4;
    c.patch = 8;
    c.patch_stride = 8;
    c.seed = 9;
    const auto r = train_sisr(m, tiny_sisr(2), c);
    return std::pair{metric_csv(r.log), encode_checkpoint(m.params())};
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_NE(a.first.find("train"), std::string::npos);
}

TEST(Fit, BestCheckpointBeatsEveryLoggedEval) {
  SisrModel<float> m(tiny_spec(BlockKind::deconv), 7);
  TrainConfig c;
  c.epochs = 4;
  c.batch = 4;
  c.patch = 8;
  c.patch_stride = 8;
  c.lr0 = 3e-3;
  const auto data = tiny_sisr(4);
  const auto r = train_sisr(m, data, c);
  for (const auto& row : r.log)
    if (row.split == "eval") {
      EXPECT_GE(r.best_metric, row.psnr_db);
    }
  SisrModel<float> best(tiny_spec(BlockKind::deconv), 0);
  for (const auto& e : decode_checkpoint(r.best_checkpoint))
    best.params()[e.name]->value = e.value.cast<float>();
  EXPECT_NEAR(mean_scores(eval_sisr(best, data.eval)).psnr_db, r.best_metric, 1e-9);
}

TEST(Fit, LossFallsOnSinglePatch) {
  SisrModel<float> m(tiny_spec(), 11);
  TrainConfig c;
  c.epochs = 1000;
  c.batch = 1;
  c.patch = 8;
  c.patch_stride = 100;
  c.augment = false;
  c.schedule = ScheduleKind::constant;
  c.eval_every = 1000;
  Rng rng(12);
  SisrDataset<float> d;
  d.train.push_back(rgb_to_y<float>(synth::natural_like(16, 16, rng)));
  d.eval = d.train;
  const auto r = train_sisr(m, d, c);
  ASSERT_EQ(r.steps, 1000);
  double first = 0, last = 0;
  for (const auto& row : r.log)
    if (row.split == "train") (row.epoch == 1 ? first : last) = row.loss;
  EXPECT_LT(last, 0.1 * first);
}

TEST(Joint, BicubicBaselineAndPatchGeometry) {
  Rng rng(13);
  JointDataset<float> d;
  for (int i = 0; i < 2; ++i) {
    const auto p = synth::rgbd_pair(32, 32, rng);
    d.train.push_back(JointSample<float>{(1.0f / 5000) * to_tensor<float>(p.depth), to_tensor<float>(p.guide)});
  }
  d.eval = d.train;
  d.depth_scale = 5000;
  const auto ps = joint_patches(d.train, 4, 16, 8);
  ASSERT_EQ(ps.size(), 2u * 9u);
  EXPECT_EQ(ps[0].depth_lr.shape(), (Shape{1, 4, 4}));
  EXPECT_EQ(ps[0].guide.shape(), (Shape{3, 16, 16}));
  EXPECT_EQ(ps[0].depth_lr(0, 1, 1), d.train[0].depth(0, 4, 4));
  const auto base = mean_joint_scores(eval_joint_bicubic(d, 4), d.depth_scale);
  EXPECT_GT(base.rmse, 0);
  EXPECT_TRUE(std::isfinite(base.rmse));
}
