#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "stvnet/gradcheck.hpp"
#include "stvnet/training.hpp"
#include "test_util.hpp"

using namespace stvnet;
using stvnet::test::random_tensor;

namespace {

// Smooth ball intensity with its thresholded mask.
Sample ball_sample(Extent3 e, double radius, double cx, double cy, double cz, int T_len) {
  Sample s;
  s.subject = "ball";
  s.target = Mask(e);
  for (int t = 0; t < T_len; ++t) {
    Volume v(e);
    const double r = radius * (1.0 - 0.05 * t);
    for (int z = 0; z < e.z; ++z)
      for (int y = 0; y < e.y; ++y)
        for (int x = 0; x < e.x; ++x) {
          const double d = std::sqrt((x - cx) * (x - cx) + (y - cy) * (y - cy) + (z - cz) * (z - cz));
          v.at(x, y, z) = float(1.0 / (1.0 + std::exp(2.0 * (d - r))));
          if (t == T_len - 1) s.target.at(x, y, z) = d <= r ? 1 : 0;
        }
    s.window.push_back(std::move(v));
  }
  return s;
}

NetworkSpec tiny_spec(Arch arch, int T_len, Extent3 e, int base = 2) {
  NetworkSpec s;
  s.arch = arch;
  s.base_channels = base;
  s.window_T = T_len;
  s.input_shape = e;
  return s;
}

}  // namespace

TEST(DiceLoss, PerfectOverlapIsMinusOne) {
  Tape<double> tape;
  Tensor<double> y({1, 1, 2, 2, 2}, std::vector<double>{1, 0, 1, 1, 0, 0, 1, 0});
  EXPECT_NEAR(dice_loss(tape.constant(y), y).value()[0], -1.0, 1e-12);
}

TEST(DiceLoss, UniformHalfAgainstHalfForeground) {
  Tape<double> tape;
  Tensor<double> p({1, 1, 2, 2, 2}, 0.5);
  Tensor<double> y({1, 1, 2, 2, 2}, std::vector<double>{1, 1, 1, 1, 0, 0, 0, 0});
  EXPECT_NEAR(dice_loss(tape.constant(p), y).value()[0], -0.5, 1e-6);
}

TEST(DiceLoss, AllBackgroundIsFinite) {
  Tape<double> tape;
  Tensor<double> z({1, 1, 2, 2, 2}, 0.0);
  auto p = tape.constant(z);
  const double v = dice_loss(p, z).value()[0];
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GE(v, -1.0);
  EXPECT_LE(v, 0.0);
}

TEST(DiceLoss, ShapeMismatchThrows) {
  Tape<double> tape;
  EXPECT_THROW(dice_loss(tape.constant(Tensor<double>({1, 1, 2, 2, 2})), Tensor<double>({1, 1, 2, 2, 3})), ShapeError);
}

TEST(DiceLoss, RangeOnRandomInputs) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tape<double> tape;
    auto p = random_tensor<double>({2, 1, 3, 3, 3}, seed, 0.0, 1.0);
    auto y = random_tensor<double>({2, 1, 3, 3, 3}, seed + 100, 0.0, 1.0);
    for (auto& v : y.storage()) v = v > 0.5 ? 1 : 0;
    const double l = dice_loss(tape.constant(p), y).value()[0];
    EXPECT_GE(l, -1.0);
    EXPECT_LE(l, 0.0);
  }
}

TEST(DiceLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Parameter<double> p("p", random_tensor<double>({1, 1, 4, 4, 4}, seed, 0.05, 0.95));
    auto y = random_tensor<double>({1, 1, 4, 4, 4}, seed + 50, 0.0, 1.0);
    for (auto& v : y.storage()) v = v > 0.5 ? 1 : 0;
    const auto rep = finite_diff_check<double>(
        [&](Tape<double>& t) { return dice_loss(t.param(p), y); }, {&p}, 1e-6);
    EXPECT_LT(rep.max_rel_error, 1e-6) << "seed " << seed;
  }
}

TEST(L1Penalty, Examples) {
  Parameter<double> a("a", Tensor<double>({1}, -2.0)), b("b", Tensor<double>({1}, 3.0));
  Tape<double> tape;
  EXPECT_DOUBLE_EQ(l1_penalty<double>({tape.param(a), tape.param(b)}, 1.0).value()[0], 5.0);
  Parameter<double> z("z", Tensor<double>({3}, 0.0));
  Tape<double> t2;
  auto pz = t2.param(z);
  auto l = l1_penalty<double>({pz}, 1.0);
  EXPECT_EQ(l.value()[0], 0.0);
  t2.backward(l);
  for (double g : z.grad.storage()) EXPECT_EQ(g, 0.0);
}

TEST(L1Penalty, Homogeneous) {
  auto net = Network<double>::build(tiny_spec(Arch::kVNet, 1, {8, 8, 4}), 1);
  auto penalty = [&] {
    Tape<double> tape;
    std::vector<Var<double>> w;
    for (auto* p : net.parameters()) w.push_back(tape.param(*p));
    return l1_penalty(w, 1e-5).value()[0];
  };
  const double before = penalty();
  for (auto* p : net.parameters()) p->value *= 2.0;
  EXPECT_NEAR(penalty(), 2 * before, 1e-12 * before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter<double> p("p", Tensor<double>({1}, 1.0));
  p.grad = Tensor<double>({1}, 1.0);
  AdamState<double> s;
  adam_step(s, {&p}, 0.001);
  EXPECT_NEAR(p.value[0], 0.999, 1e-8);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, ZeroGradientAndZeroRateAreIdentity) {
  Parameter<double> p("p", random_tensor<double>({5}, 3, -1, 1));
  const auto start = p.value;
  AdamState<double> s;
  adam_step(s, {&p}, 0.001);
  EXPECT_EQ(p.value, start);
  p.grad = random_tensor<double>({5}, 4, -1, 1);
  AdamState<double> s2;
  adam_step(s2, {&p}, 0.0);
  EXPECT_EQ(p.value, start);
}

TEST(Adam, DeterministicTrajectory) {
  auto run = [] {
    Parameter<double> p("p", random_tensor<double>({4}, 1, -1, 1));
    AdamState<double> s;
    for (int i = 0; i < 20; ++i) {
      p.grad = p.value;
      p.grad *= 2.0;
      adam_step(s, {&p}, 0.01);
    }
    return p.value;
  };
  EXPECT_EQ(run(), run());
}

TEST(Augment, IdentityAndDoubleFlip) {
  auto s = ball_sample({12, 10, 4}, 3, 4, 5, 1.5, 2);
  const auto orig = s;
  apply_augment({false, 0.0}, s.window, s.target);
  EXPECT_EQ(s.window, orig.window);
  EXPECT_EQ(s.target, orig.target);
  apply_augment({true, 0.0}, s.window, s.target);
  EXPECT_NE(s.target, orig.target);
  EXPECT_EQ(count_foreground(s.target), count_foreground(orig.target));
  apply_augment({true, 0.0}, s.window, s.target);
  EXPECT_EQ(s.window, orig.window);
  EXPECT_EQ(s.target, orig.target);
}

TEST(Augment, FlipMirrorsLeftRight) {
  Mask m({5, 1, 1});
  m.at(0, 0, 0) = 1;
  std::vector<Volume> w{Volume({5, 1, 1})};
  w[0].at(1, 0, 0) = 2.f;
  apply_augment({true, 0.0}, w, m);
  EXPECT_EQ(m.at(4, 0, 0), 1);
  EXPECT_EQ(w[0].at(3, 0, 0), 2.f);
}

TEST(Augment, RotationRoundTripIsClose) {
  auto s = ball_sample({32, 32, 4}, 7, 17, 14, 1.5, 1);
  const auto orig = s;
  apply_augment({false, 15.0}, s.window, s.target);
  EXPECT_NE(s.window, orig.window);
  apply_augment({false, -15.0}, s.window, s.target);
  double mad = 0, lo = 1e9, hi = -1e9;
  for (std::size_t i = 0; i < orig.window[0].size(); ++i) {
    mad += std::abs(s.window[0].data[i] - orig.window[0].data[i]);
    lo = std::min(lo, double(orig.window[0].data[i]));
    hi = std::max(hi, double(orig.window[0].data[i]));
  }
  mad /= double(orig.window[0].size());
  EXPECT_LT(mad, 0.05 * (hi - lo));
  EXPECT_GT(dsc(s.target, orig.target), 0.9);
}

TEST(Augment, RotationOfCentredDiscPreservesCardinality) {
  auto s = ball_sample({21, 21, 3}, 5, 10, 10, 1, 1);
  const auto n0 = count_foreground(s.target);
  apply_augment({false, 12.0}, s.window, s.target);
  EXPECT_NEAR(double(count_foreground(s.target)), double(n0), 0.1 * double(n0));
}

TEST(Augment, DrawIsWithinRange) {
  Rng rng(4);
  int flips = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = draw_augment(rng);
    EXPECT_GE(a.angle_deg, -15.0);
    EXPECT_LE(a.angle_deg, 15.0);
    flips += a.flip;
  }
  EXPECT_GT(flips, 400);
  EXPECT_LT(flips, 600);
}

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.folds = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c.folds = 5;
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c.batch_size = 4;
  c.learning_rate = -1e-3;
  EXPECT_THROW(c.validate(), ConfigError);
  TrainConfig d;
  d.epochs = 17;
  d.seed = 99;
  d.literal_l1 = true;
  d.stop_at_train_dsc = 0.95;
  const auto back = train_config_from_json(to_json(d));
  EXPECT_EQ(back.stop_at_train_dsc, 0.95);
  EXPECT_EQ(back.epochs, 17);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.effective_l1_weight(), 1.0);
}

TEST(Train, EmptyDatasetAndWindowMismatch) {
  const Extent3 e{8, 8, 4};
  TrainConfig cfg;
  cfg.window_T = 1;
  EXPECT_THROW(train<float>({}, {}, tiny_spec(Arch::kVNet, 1, e), cfg), ConfigError);
  cfg.window_T = 2;
  std::vector<Sample> data{ball_sample(e, 2, 4, 4, 2, 2)};
  EXPECT_THROW(train<float>(data, {}, tiny_spec(Arch::kVNet, 1, e), cfg), ConfigError);
}

TEST(Train, ZeroLearningRateLeavesInitialWeights) {
  const Extent3 e{8, 8, 4};
  auto spec = tiny_spec(Arch::kVNet, 1, e);
  TrainConfig cfg;
  cfg.window_T = 1;
  cfg.epochs = 1;
  cfg.learning_rate = 0;
  cfg.seed = 3;
  cfg.augment = false;
  std::vector<Sample> data{ball_sample(e, 2.5, 4, 4, 2, 1), ball_sample(e, 2, 3, 4, 1.5, 1)};
  auto res = train<float>(data, {}, spec, cfg);
  auto fresh = Network<float>::build(spec, cfg.seed);
  auto a = res.net.parameters(), b = fresh.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
}

TEST(Train, NonFiniteLossNamesEpochAndBatch) {
  const Extent3 e{8, 8, 4};
  TrainConfig cfg;
  cfg.window_T = 1;
  cfg.epochs = 1;
  cfg.augment = false;
  auto bad = ball_sample(e, 2, 4, 4, 2, 1);
  bad.window[0].data[5] = std::numeric_limits<float>::quiet_NaN();
  try {
    train<float>({bad}, {}, tiny_spec(Arch::kVNet, 1, e), cfg);
    FAIL();
  } catch (const TrainingError& err) {
    const std::string msg = err.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos);
    EXPECT_NE(msg.find("batch 1"), std::string::npos);
  }
}

TEST(Train, OverfitsSingleSampleAndIsDeterministic) {
  const Extent3 e{16, 16, 4};
  auto spec = tiny_spec(Arch::kSTVNet, 2, e);
  TrainConfig cfg;
  cfg.window_T = 2;
  cfg.epochs = 60;
  cfg.learning_rate = 0.01;
  cfg.augment = false;
  cfg.seed = 11;
  std::vector<Sample> data{ball_sample(e, 4.5, 8, 7, 1.5, 2)};
  auto a = train<float>(data, data, spec, cfg);
  auto b = train<float>(data, data, spec, cfg);
  std::ostringstream la, lb;
  write_log_csv(la, a.log);
  write_log_csv(lb, b.log);
  EXPECT_EQ(la.str(), lb.str());
  ASSERT_EQ(a.log.size(), 120u);
  EXPECT_EQ(a.log[0].split, "train");
  EXPECT_EQ(a.log[1].split, "val");
  EXPECT_LT(a.log[a.log.size() - 2].loss, a.log[0].loss);
  EXPECT_GE(a.log[a.log.size() - 2].dsc, 0.9);
  EXPECT_EQ(la.str().substr(0, 21), "epoch,split,loss,dsc\n");
}

TEST(Train, StopsOnceTrainingDscIsReached) {
  const Extent3 e{16, 16, 4};
  TrainConfig cfg;
  cfg.window_T = 2;
  cfg.epochs = 60;
  cfg.learning_rate = 0.01;
  cfg.augment = false;
  cfg.seed = 11;
  cfg.stop_at_train_dsc = 0.5;
  std::vector<Sample> data{ball_sample(e, 4.5, 8, 7, 1.5, 2)};
  const auto res = train<float>(data, {}, tiny_spec(Arch::kSTVNet, 2, e), cfg);
  ASSERT_LT(res.log.size(), 60u);
  EXPECT_GE(res.log.back().dsc, 0.5);
  for (std::size_t i = 0; i + 1 < res.log.size(); ++i) EXPECT_LT(res.log[i].dsc, 0.5);
  cfg.stop_at_train_dsc = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Train, AugmentedTrainingRuns) {
  const Extent3 e{8, 8, 4};
  TrainConfig cfg;
  cfg.window_T = 1;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  std::vector<Sample> data{ball_sample(e, 2.5, 4, 4, 2, 1), ball_sample(e, 2, 3, 4, 1.5, 1),
                           ball_sample(e, 3, 4, 3, 2, 1)};
  auto res = train<float>(data, {}, tiny_spec(Arch::kVNet, 1, e), cfg);
  EXPECT_EQ(res.log.size(), 2u);
  for (const auto& r : res.log) EXPECT_TRUE(std::isfinite(r.loss));
}

TEST(Predict, ReturnsOneMapPerSampleInUnitRange) {
  const Extent3 e{8, 8, 4};
  auto net = Network<float>::build(tiny_spec(Arch::kSTNet, 2, e), 2);
  std::vector<Sample> data;
  for (int i = 0; i < 5; ++i) data.push_back(ball_sample(e, 2 + 0.2 * i, 4, 4, 2, 2));
  const auto maps = predict(net, data, 2);
  ASSERT_EQ(maps.size(), 5u);
  for (const auto& m : maps)
    for (float v : m.data) {
      EXPECT_GE(v, 0.f);
      EXPECT_LE(v, 1.f);
    }
  const auto single = forward_segment(net, std::span<const Volume>(data[3].window));
  EXPECT_EQ(single.data, maps[3].data);
}
