#include <gtest/gtest.h>

#include <cmath>

#include "stvnet/gradcheck.hpp"
#include "stvnet/ops.hpp"
#include "test_util.hpp"

using namespace stvnet;
using stvnet::test::random_tensor;

namespace {

Tensor<double> run_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int stride = 1) {
  Tape<double> tape;
  return conv3d(tape.constant(x), tape.constant(w), tape.constant(b), stride).value();
}

Tensor<double> run_convt(const Tensor<double>& x, const Tensor<double>& w, int stride) {
  Tape<double> tape;
  return conv_transpose3d(tape.constant(x), tape.constant(w), Var<double>{}, stride).value();
}

}  // namespace

TEST(Tensor, RejectsNonPositiveExtents) {
  EXPECT_THROW(Tensor<double>({2, 0, 3}), ShapeError);
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>(3)), ShapeError);
}

TEST(Conv3d, IdentityKernelReproducesInput) {
  const auto x = random_tensor({2, 1, 3, 4, 5}, 1);
  const auto y = run_conv(x, Tensor<double>::ones({1, 1, 1, 1, 1}), Tensor<double>::zeros({1}));
  EXPECT_EQ(y, x);
}

TEST(Conv3d, ZeroKernelGivesZero) {
  const auto x = random_tensor({1, 3, 4, 4, 4}, 2);
  const auto y = run_conv(x, Tensor<double>::zeros({2, 3, 3, 3, 3}), Tensor<double>::zeros({2}));
  for (double v : y.storage()) EXPECT_EQ(v, 0.0);
}

TEST(Conv3d, OnesKernelCountsReceptiveField) {
  const auto y = run_conv(Tensor<double>::ones({1, 1, 5, 5, 5}), Tensor<double>::ones({1, 1, 3, 3, 3}),
                          Tensor<double>::zeros({1}));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 5, 5, 5}));
  EXPECT_DOUBLE_EQ(y.at(0, 0, 2, 2, 2), 27.0);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0, 0, 0), 8.0);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 4, 4, 4), 8.0);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0, 2, 2), 18.0);
}

TEST(Conv3d, MatchesDirectSummation) {
  for (int stride : {1, 2}) {
    const auto x = random_tensor({2, 3, 6, 5, 4}, 10 + stride);
    const auto w = random_tensor({4, 3, 3, 3, 3}, 20 + stride);
    const auto b = random_tensor({4}, 30 + stride);
    const auto got = run_conv(x, w, b, stride);
    const auto want = test::naive_conv3d(x, w, &b, stride);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LT(max_abs_diff(got, want), 1e-12);
  }
}

TEST(Conv3d, ChannelMismatchNamesAxis) {
  try {
    run_conv(Tensor<double>::ones({1, 2, 4, 4, 4}), Tensor<double>::ones({1, 3, 3, 3, 3}),
             Tensor<double>::zeros({1}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.axis(), "channel");
  }
}

TEST(Conv3d, IsLinearInInput) {
  const auto x = random_tensor({1, 2, 4, 4, 4}, 3);
  const auto y = random_tensor({1, 2, 4, 4, 4}, 4);
  const auto w = random_tensor({3, 2, 3, 3, 3}, 5);
  const auto zero = Tensor<double>::zeros({3});
  const double a = 0.7, b = -1.3;
  Tensor<double> mix(x.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
  const auto lhs = run_conv(mix, w, zero);
  const auto cx = run_conv(x, w, zero);
  const auto cy = run_conv(y, w, zero);
  for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], a * cx[i] + b * cy[i], 1e-10);
}

TEST(ConvTranspose3d, SingleVoxelScattersKernel) {
  Tensor<double> x({1, 1, 2, 2, 2});
  x.at(0, 0, 1, 0, 1) = 1.0;
  const auto y = run_convt(x, Tensor<double>::ones({1, 1, 2, 2, 2}), 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4, 4}));
  for (int z = 0; z < 4; ++z)
    for (int yy = 0; yy < 4; ++yy)
      for (int xx = 0; xx < 4; ++xx) {
        const bool inside = z >= 2 && yy < 2 && xx >= 2;
        EXPECT_EQ(y.at(0, 0, z, yy, xx), inside ? 1.0 : 0.0);
      }
}

TEST(ConvTranspose3d, ZeroInputZeroOutput) {
  const auto y = run_convt(Tensor<double>::zeros({1, 2, 2, 2, 2}), random_tensor({2, 3, 2, 2, 2}, 1), 2);
  for (double v : y.storage()) EXPECT_EQ(v, 0.0);
}

TEST(ConvTranspose3d, IsAdjointOfConv3d) {
  struct Case {
    int k;
    int stride;
  };
  for (Case c : {Case{3, 1}, Case{2, 2}, Case{3, 2}}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto w = random_tensor({3, 2, c.k, c.k, c.k}, 100 + seed);
      const auto x = random_tensor({1, 2, 4, 4, 4}, 200 + seed);
      const auto cx = run_conv(x, w, Tensor<double>::zeros({3}), c.stride);
      const auto y = random_tensor(cx.shape(), 300 + seed);
      const auto ty = run_convt(y, w, c.stride);
      ASSERT_EQ(ty.shape(), x.shape());
      EXPECT_NEAR(dot(cx, y), dot(x, ty), 1e-10) << "k=" << c.k << " stride=" << c.stride;
    }
  }
}

TEST(MaxPool3d, PicksWindowMaximum) {
  Tensor<double> x({1, 1, 2, 2, 2});
  for (std::size_t i = 0; i < 8; ++i) x[i] = double(i + 1);
  Tape<double> tape;
  EXPECT_EQ(max_pool3d(tape.constant(x)).value()[0], 8.0);
  const auto c = max_pool3d(tape.constant(Tensor<double>({1, 2, 4, 4, 4}, 3.5))).value();
  for (double v : c.storage()) EXPECT_EQ(v, 3.5);
}

TEST(MaxPool3d, BackwardRoutesToArgmax) {
  // Distinct values: a random permutation of 0..63.
  Tensor<double> x({1, 1, 4, 4, 4});
  std::vector<int> perm(64);
  for (int i = 0; i < 64; ++i) perm[std::size_t(i)] = i;
  Rng rng(7);
  rng.shuffle(perm);
  for (std::size_t i = 0; i < 64; ++i) x[i] = perm[i];

  Parameter<double> p("x", x);
  Tape<double> tape;
  tape.backward(sum(max_pool3d(tape.param(p))));

  // Expected: enumerate every 2x2x2 window and mark its maximum.
  Tensor<double> want(x.shape());
  for (int z = 0; z < 4; z += 2)
    for (int y = 0; y < 4; y += 2)
      for (int xx = 0; xx < 4; xx += 2) {
        int bz = z, by = y, bx = xx;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              if (x.at(0, 0, z + dz, y + dy, xx + dx) > x.at(0, 0, bz, by, bx)) {
                bz = z + dz;
                by = y + dy;
                bx = xx + dx;
              }
        want.at(0, 0, bz, by, bx) = 1.0;
      }
  EXPECT_EQ(p.grad, want);
}

TEST(MaxPool3d, TiesGoToFirstIndex) {
  Parameter<double> p("x", Tensor<double>({1, 1, 2, 2, 2}, 1.0));
  Tape<double> tape;
  tape.backward(sum(max_pool3d(tape.param(p))));
  EXPECT_EQ(p.grad[0], 1.0);
  for (std::size_t i = 1; i < 8; ++i) EXPECT_EQ(p.grad[i], 0.0);
}

TEST(MaxPool3d, RejectsIndivisibleExtent) {
  Tape<double> tape;
  EXPECT_THROW(max_pool3d(tape.constant(Tensor<double>({1, 1, 5, 4, 4}))), ShapeError);
}

TEST(BatchNorm3d, ConstantInputNormalizesToZero) {
  Tape<double> tape;
  BatchNormState<double> st(1);
  const auto y = batch_norm3d(tape.constant(Tensor<double>({2, 1, 2, 2, 2}, 4.2)),
                              tape.constant(Tensor<double>::ones({1})), tape.constant(Tensor<double>::zeros({1})), st,
                              true)
                     .value();
  for (double v : y.storage()) EXPECT_LE(std::abs(v), std::sqrt(1e-5));
}

TEST(BatchNorm3d, ZeroGammaGivesBeta) {
  Tape<double> tape;
  BatchNormState<double> st(2);
  const auto y = batch_norm3d(tape.constant(random_tensor({2, 2, 2, 2, 2}, 9)),
                              tape.constant(Tensor<double>::zeros({2})),
                              tape.constant(Tensor<double>({2}, std::vector<double>{0.3, -0.4})), st, true)
                     .value();
  for (int n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 8; ++i) {
      EXPECT_EQ(y[(n * 2 + 0) * 8 + i], 0.3);
      EXPECT_EQ(y[(n * 2 + 1) * 8 + i], -0.4);
    }
}

TEST(BatchNorm3d, TwoVoxelHandEvaluation) {
  Tape<double> tape;
  BatchNormState<double> st(1);
  const auto y = batch_norm3d(tape.constant(Tensor<double>({1, 1, 1, 1, 2}, std::vector<double>{0.0, 2.0})),
                              tape.constant(Tensor<double>::ones({1})), tape.constant(Tensor<double>::zeros({1})), st,
                              true)
                     .value();
  // mean 1, biased variance 1: (+-1) / sqrt(1 + 1e-5)
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y[0], -expected, 1e-15);
  EXPECT_NEAR(y[1], expected, 1e-15);
  EXPECT_NEAR(expected, 0.999995, 1e-6);
  // running stats: momentum 0.1 towards mean 1 and unbiased variance 2
  EXPECT_NEAR(st.running_mean[0], 0.1, 1e-15);
  EXPECT_NEAR(st.running_var[0], 0.9 + 0.2, 1e-15);
}

TEST(BatchNorm3d, TrainingOutputHasBetaMeanGammaVariance) {
  Tape<double> tape;
  BatchNormState<double> st(1);
  const auto y = batch_norm3d(tape.constant(random_tensor({3, 1, 4, 4, 4}, 11, -3, 5)),
                              tape.constant(Tensor<double>({1}, 1.7)), tape.constant(Tensor<double>({1}, -0.2)), st,
                              true)
                     .value();
  double mean = y.sum() / double(y.size());
  double var = 0;
  for (double v : y.storage()) var += (v - mean) * (v - mean);
  var /= double(y.size());
  EXPECT_NEAR(mean, -0.2, 1e-12);
  EXPECT_NEAR(var, 1.7 * 1.7, 1e-4);
}

TEST(Activation, ScalarValues) {
  Tape<double> tape;
  const auto x = tape.constant(Tensor<double>({3}, std::vector<double>{-3.0, 0.0, 3.0}));
  const auto r = relu(x).value();
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[2], 3.0);
  EXPECT_EQ(sigmoid(x).value()[1], 0.5);
  EXPECT_EQ(tanh(x).value()[1], 0.0);
  const auto s = sigmoid(tape.constant(random_tensor({100}, 4, -50, 50))).value();
  for (double v : s.storage()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(ConcatChannels, ShapesAndIdentity) {
  Tape<double> tape;
  const auto a = tape.constant(random_tensor({1, 2, 4, 4, 4}, 1));
  const auto b = tape.constant(random_tensor({1, 3, 4, 4, 4}, 2));
  EXPECT_EQ(concat_channels(a, b).shape(), (Shape{1, 5, 4, 4, 4}));
  const auto empty = tape.constant(Tensor<double>());
  EXPECT_EQ(concat_channels(a, empty).value(), a.value());
  EXPECT_EQ(concat_channels(empty, b).value(), b.value());
  EXPECT_THROW(concat_channels(a, tape.constant(Tensor<double>({1, 1, 4, 4, 2}))), ShapeError);
}

TEST(ConcatChannels, BackwardSplitsOnes) {
  Parameter<double> a("a", random_tensor({2, 2, 2, 3, 2}, 1));
  Parameter<double> b("b", random_tensor({2, 1, 2, 3, 2}, 2));
  Tape<double> tape;
  tape.backward(sum(concat_channels(tape.param(a), tape.param(b))));
  EXPECT_EQ(a.grad, Tensor<double>::ones(a.value.shape()));
  EXPECT_EQ(b.grad, Tensor<double>::ones(b.value.shape()));
}

TEST(Backward, SumGivesOnesAndConstantGivesZero) {
  Parameter<double> x("x", random_tensor({2, 3}, 1));
  {
    Tape<double> tape;
    tape.backward(sum(tape.param(x)));
    EXPECT_EQ(x.grad, Tensor<double>::ones({2, 3}));
  }
  x.zero_grad();
  {
    Tape<double> tape;
    tape.param(x);
    auto loss = sum(tape.constant(Tensor<double>({1}, 0.0)));
    tape.backward(loss);
    EXPECT_EQ(x.grad, Tensor<double>::zeros({2, 3}));
  }
}

TEST(Backward, RejectsNonScalarLoss) {
  Parameter<double> x("x", random_tensor({2, 3}, 1));
  Tape<double> tape;
  EXPECT_THROW(tape.backward(tape.param(x)), ShapeError);
}

TEST(GradCheck, QuadraticIsExact) {
  Parameter<double> w("w", random_tensor({7}, 3));
  auto loss = [&](Tape<double>& t) {
    auto v = t.param(w);
    return sum(mul(v, v));
  };
  EXPECT_LT(finite_diff_check<double>(loss, {&w}, 1e-4).max_rel_error, 1e-10);
}

// Every differentiable op against central differences, 10 seeds, random
// 3x4x4x4 inputs. The loss is a random projection <r, op(x)>.
class OpGradient : public ::testing::TestWithParam<std::uint64_t> {};

namespace {

template <class Build>
double op_error(std::uint64_t seed, std::vector<Parameter<double>*> params, Build build) {
  Parameter<double>* first = params.front();
  Tensor<double> proj;
  {
    Tape<double> t;
    proj = random_tensor(build(t).value().shape(), seed * 977 + 13);
  }
  (void)first;
  auto loss = [&](Tape<double>& t) { return sum(mul(build(t), t.constant(proj))); };
  return finite_diff_check<double>(loss, params, 1e-4).max_rel_error;
}

}  // namespace

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const std::uint64_t s = GetParam();
  Parameter<double> x("x", random_tensor({1, 3, 4, 4, 4}, s));
  Parameter<double> x2("x2", random_tensor({2, 3, 4, 4, 4}, s + 1));
  Parameter<double> w("w", random_tensor({2, 3, 3, 3, 3}, s + 2, -0.5, 0.5));
  Parameter<double> wt("wt", random_tensor({3, 2, 2, 2, 2}, s + 3, -0.5, 0.5));
  Parameter<double> b("b", random_tensor({2}, s + 4));
  Parameter<double> gamma("gamma", random_tensor({3}, s + 5, 0.5, 1.5));
  Parameter<double> beta("beta", random_tensor({3}, s + 6));
  Parameter<double> y("y", random_tensor({1, 2, 4, 4, 4}, s + 7));
  Parameter<double> v("v", random_tensor({1, 3, 4, 4, 4}, s + 8));
  const double tol = 1e-4;

  EXPECT_LT(op_error(s, {&x, &w, &b}, [&](Tape<double>& t) { return conv3d(t.param(x), t.param(w), t.param(b)); }),
            tol)
      << "conv3d";
  EXPECT_LT(
      op_error(s, {&x, &w, &b}, [&](Tape<double>& t) { return conv3d(t.param(x), t.param(w), t.param(b), 2); }),
      tol)
      << "conv3d stride 2";
  EXPECT_LT(op_error(s, {&x, &wt, &b},
                     [&](Tape<double>& t) { return conv_transpose3d(t.param(x), t.param(wt), t.param(b), 2); }),
            tol)
      << "conv_transpose3d";
  EXPECT_LT(op_error(s, {&x}, [&](Tape<double>& t) { return max_pool3d(t.param(x)); }), tol) << "max_pool3d";
  EXPECT_LT(op_error(s, {&x2, &gamma, &beta},
                     [&](Tape<double>& t) {
                       BatchNormState<double> st(3);
                       return batch_norm3d(t.param(x2), t.param(gamma), t.param(beta), st, true);
                     }),
            tol)
      << "batch_norm3d train";
  EXPECT_LT(op_error(s, {&x2, &gamma, &beta},
                     [&](Tape<double>& t) {
                       BatchNormState<double> st(3);
                       st.running_mean = random_tensor({3}, s + 9);
                       st.running_var = random_tensor({3}, s + 10, 0.5, 2.0);
                       return batch_norm3d(t.param(x2), t.param(gamma), t.param(beta), st, false);
                     }),
            tol)
      << "batch_norm3d eval";
  for (Activation a : {Activation::kRelu, Activation::kSigmoid, Activation::kTanh}) {
    EXPECT_LT(op_error(s, {&x}, [&](Tape<double>& t) { return activation(t.param(x), a); }), tol) << to_string(a);
  }
  EXPECT_LT(op_error(s, {&x, &y}, [&](Tape<double>& t) { return concat_channels(t.param(x), t.param(y)); }), tol)
      << "concat_channels";
  EXPECT_LT(op_error(s, {&x}, [&](Tape<double>& t) { return slice_channels(t.param(x), 1, 2); }), tol)
      << "slice_channels";
  EXPECT_LT(op_error(s, {&x2}, [&](Tape<double>& t) { return slice_batch(t.param(x2), 1, 1); }), tol)
      << "slice_batch";
  EXPECT_LT(op_error(s, {&x, &v}, [&](Tape<double>& t) { return mul(t.param(x), t.param(v)); }), tol) << "mul";
  EXPECT_LT(op_error(s, {&v, &x2}, [&](Tape<double>& t) { return mul_batch_broadcast(t.param(v), t.param(x2)); }),
            tol)
      << "mul_batch_broadcast";
  EXPECT_LT(op_error(s, {&x, &v}, [&](Tape<double>& t) { return add(t.param(x), t.param(v)); }), tol) << "add";
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, OpGradient, ::testing::Range<std::uint64_t>(0, 10));

TEST(Determinism, ForwardIsBitIdentical) {
  const auto x = random_tensor({2, 3, 6, 6, 4}, 5);
  const auto w = random_tensor({4, 3, 3, 3, 3}, 6);
  const auto b = random_tensor({4}, 7);
  EXPECT_EQ(run_conv(x, w, b), run_conv(x, w, b));
}
