#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "gradprom/gradcheck.hpp"
#include "gradprom/rng.hpp"
#include "gradprom/tape.hpp"
#include "gradprom/tensor.hpp"

using namespace gradprom;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(shape_numel(shape));
  for (double& v : d) v = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(d));
}

// Random linear functional of an op's output: sum(out * c) with constant c.
// Turns any tensor-valued op into a scalar target for grad_check.
Tensor pick(Tape& tape, const Tensor& out, Rng& rng) {
  std::vector<double> c(out.numel());
  for (double& v : c) v = rng.uniform(-1.0, 1.0);
  return tape.sum(tape.mul(out, Tensor(out.shape(), std::move(c))));
}

}  // namespace

TEST(Elementwise, AddSubMulValues) {
  Tape tape;
  Tensor a({2}, {1, 2});
  Tensor b({2}, {3, 4});
  Tensor s = tape.add(a, b);
  EXPECT_EQ(s[0], 4.0);
  EXPECT_EQ(s[1], 6.0);
  Tensor d = tape.sub(a, b);
  EXPECT_EQ(d[0], -2.0);
  Tensor m = tape.mul(a, b);
  EXPECT_EQ(m[1], 8.0);
}

TEST(Elementwise, ReluValues) {
  Tape tape;
  Tensor r = tape.relu(Tensor({3}, {-1, 0, 2}));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 0.0);
  EXPECT_EQ(r[2], 2.0);
}

TEST(Elementwise, MulBackwardIsProductRule) {
  Tape tape;
  Tensor a = tape.param(Tensor({1}, {2}));
  Tensor b = tape.param(Tensor({1}, {3}));
  Tensor loss = tape.mul(a, b);
  auto grads = tape.backward(loss);
  EXPECT_EQ(grads.at(a.node())[0], 3.0);
  EXPECT_EQ(grads.at(b.node())[0], 2.0);
}

TEST(Elementwise, ShapeMismatchThrows) {
  Tape tape;
  EXPECT_THROW(tape.add(Tensor({2}, {1, 2}), Tensor({3}, {1, 2, 3})), std::invalid_argument);
}

TEST(Elementwise, NonFiniteOutputThrows) {
  Tape tape;
  Tensor big = Tensor({1}, {1e308});
  EXPECT_THROW(tape.scale(big, 1e308), numeric_error);
}

TEST(Matmul, IdentityAndHandOracle) {
  Tape tape;
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor r = tape.matmul(a, eye);
  EXPECT_TRUE(r.bitwise_equal(a.detached()));

  // hand multiplication: [[1,2],[3,4]] * [[5],[6]] = [[17],[39]]
  Tensor b({2, 1}, {5, 6});
  Tensor r2 = tape.matmul(a, b);
  EXPECT_EQ(r2[0], 17.0);
  EXPECT_EQ(r2[1], 39.0);
}

TEST(Matmul, DimensionMismatchThrows) {
  Tape tape;
  EXPECT_THROW(tape.matmul(Tensor({2, 3}, std::vector<double>(6, 1.0)),
                           Tensor({2, 2}, std::vector<double>(4, 1.0))),
               std::invalid_argument);
}

TEST(Matmul, GradMatchesFiniteDifferences) {
  Rng rng(7);
  Tensor a = rand_tensor({3, 4}, rng);
  Tensor b = rand_tensor({4, 2}, rng);
  Rng crng(8);
  auto wrt_a = [&](Tape& t, const Tensor& x) {
    Rng local(8);
    return pick(t, t.matmul(x, b), local);
  };
  auto wrt_b = [&](Tape& t, const Tensor& x) {
    Rng local(8);
    return pick(t, t.matmul(a, x), local);
  };
  EXPECT_LT(grad_check(wrt_a, a, 1e-5), 1e-7);
  EXPECT_LT(grad_check(wrt_b, b, 1e-5), 1e-7);
}

TEST(Conv2d, OneByOneIdentityKernel) {
  Tape tape;
  Rng rng(3);
  Tensor x = rand_tensor({1, 4, 4}, rng);
  Tensor k({1, 1, 1, 1}, {1.0});
  Tensor bias({1}, {0.0});
  Tensor y = tape.conv2d(x, k, bias, PadMode::kZero, 0, 1);
  EXPECT_TRUE(y.bitwise_equal(x));
}

TEST(Conv2d, OnesKernelTapCount) {
  // 3x3 all-ones kernel, zero padding 1, constant-1 4x4 input: each output
  // counts the taps that land inside the image (4 corner, 6 edge, 9 interior).
  Tape tape;
  Tensor x = Tensor::full({1, 4, 4}, 1.0);
  Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor bias({1}, {0.0});
  Tensor y = tape.conv2d(x, k, bias, PadMode::kZero, 1, 1);
  EXPECT_EQ(y[0], 4.0);                       // corner
  EXPECT_EQ(y[1], 6.0);                       // top edge
  EXPECT_EQ(y[5], 9.0);                       // interior
  EXPECT_EQ(y[15], 4.0);                      // opposite corner
}

TEST(Conv2d, EvenKernelThrows) {
  Tape tape;
  EXPECT_THROW(tape.conv2d(Tensor::full({1, 4, 4}, 1.0), Tensor::full({1, 1, 2, 2}, 1.0),
                           Tensor({1}, {0.0}), PadMode::kZero, 0, 1),
               std::invalid_argument);
}

TEST(Conv2d, NonIntegerOutputThrows) {
  Tape tape;
  // (5 - 3) / 2 + 1 is fine; (6 - 3) / 2 is not.
  EXPECT_THROW(tape.conv2d(Tensor::full({1, 6, 6}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0),
                           Tensor({1}, {0.0}), PadMode::kZero, 0, 2),
               std::invalid_argument);
}

TEST(Conv2d, GradMatchesFiniteDifferences) {
  Rng rng(11);
  Tensor x = rand_tensor({2, 5, 5}, rng);
  Tensor k = rand_tensor({3, 2, 3, 3}, rng);
  Tensor bias = rand_tensor({3}, rng);
  for (PadMode mode : {PadMode::kZero, PadMode::kReflect}) {
    auto wrt_x = [&](Tape& t, const Tensor& v) {
      Rng local(5);
      return pick(t, t.conv2d(v, k, bias, mode, 1, 1), local);
    };
    auto wrt_k = [&](Tape& t, const Tensor& v) {
      Rng local(5);
      return pick(t, t.conv2d(x, v, bias, mode, 1, 1), local);
    };
    auto wrt_b = [&](Tape& t, const Tensor& v) {
      Rng local(5);
      return pick(t, t.conv2d(x, k, v, mode, 1, 1), local);
    };
    EXPECT_LT(grad_check(wrt_x, x, 1e-5), 1e-6);
    EXPECT_LT(grad_check(wrt_k, k, 1e-5), 1e-6);
    EXPECT_LT(grad_check(wrt_b, bias, 1e-5), 1e-6);
  }
}

TEST(Conv2d, StridedGradMatchesFiniteDifferences) {
  Rng rng(13);
  Tensor x = rand_tensor({1, 2, 5, 5}, rng);  // batched input
  Tensor k = rand_tensor({2, 2, 3, 3}, rng);
  Tensor bias = rand_tensor({2}, rng);
  auto wrt_x = [&](Tape& t, const Tensor& v) {
    Rng local(5);
    return pick(t, t.conv2d(v, k, bias, PadMode::kZero, 0, 2), local);
  };
  EXPECT_LT(grad_check(wrt_x, x, 1e-5), 1e-6);
}

TEST(Pooling, AvgPoolHandAverage) {
  Tape tape;
  Tensor x({2, 2}, {0, 1, 1, 0});
  Tensor y = tape.avgpool(x, 2);
  EXPECT_EQ(y.numel(), 1u);
  EXPECT_EQ(y[0], 0.5);
}

TEST(Pooling, UpsampleThenAvgPoolIsIdentity) {
  Tape tape;
  Rng rng(19);
  Tensor x = rand_tensor({2, 3, 4}, rng);
  Tensor y = tape.avgpool(tape.upsample_nearest(x, 2), 2);
  EXPECT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(Pooling, GlobalAvgPoolOfConstant) {
  Tape tape;
  Tensor y = tape.global_avgpool(Tensor::full({3, 4, 4}, 0.25));
  EXPECT_EQ(y.shape(), (Shape{3, 1, 1}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(y[i], 0.25);
}

TEST(Pooling, NonDivisibleThrows) {
  Tape tape;
  EXPECT_THROW(tape.avgpool(Tensor::full({3, 3}, 1.0), 2), std::invalid_argument);
}

TEST(Pooling, GradMatchesFiniteDifferences) {
  Rng rng(23);
  Tensor x = rand_tensor({2, 4, 4}, rng);
  auto kinds = std::vector<std::function<Tensor(Tape&, const Tensor&)>>{
      [](Tape& t, const Tensor& v) { return t.avgpool(v, 2); },
      [](Tape& t, const Tensor& v) { return t.upsample_nearest(v, 2); },
      [](Tape& t, const Tensor& v) { return t.global_avgpool(v); },
  };
  for (auto& op : kinds) {
    auto f = [&](Tape& t, const Tensor& v) {
      Rng local(5);
      return pick(t, op(t, v), local);
    };
    EXPECT_LT(grad_check(f, x, 1e-5), 1e-6);
  }
}

TEST(Reduce, MeanValueAndBackward) {
  Tape tape;
  Tensor x = tape.param(Tensor({4}, {1, 2, 3, 4}));
  Tensor m = tape.mean(x);
  EXPECT_EQ(m.item(), 2.5);
  auto grads = tape.backward(m);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(grads.at(x.node())[i], 0.25);
}

TEST(Reduce, ReshapePreservesRowMajorOrder) {
  Tape tape;
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor y = tape.reshape(x, {3, 2});
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y[i], x[i]);
  EXPECT_THROW(tape.reshape(x, {4, 2}), std::invalid_argument);
}

TEST(Reduce, ConcatChannels) {
  Tape tape;
  Tensor a = Tensor::full({1, 4, 4}, 1.0);
  Tensor b = Tensor::full({2, 4, 4}, 2.0);
  Tensor c = tape.concat_channels({a, b});
  EXPECT_EQ(c.shape(), (Shape{3, 4, 4}));
  EXPECT_EQ(c[0], 1.0);
  EXPECT_EQ(c[16], 2.0);
  EXPECT_EQ(c[47], 2.0);
}

TEST(LogSoftmax, SymmetryAndStability) {
  Tape tape;
  Tensor y = tape.log_softmax(Tensor({2}, {0, 0}));
  EXPECT_NEAR(y[0], -std::log(2.0), 1e-15);
  EXPECT_NEAR(y[1], -std::log(2.0), 1e-15);

  Tensor z = tape.log_softmax(Tensor({2}, {1000, 0}));
  EXPECT_NEAR(z[0], 0.0, 1e-12);
  EXPECT_NEAR(z[1], -1000.0, 1e-9);
}

TEST(LogSoftmax, RowsNormalize) {
  Tape tape;
  Rng rng(29);
  Tensor x = rand_tensor({5, 7}, rng, -3.0, 3.0);
  Tensor y = tape.log_softmax(x);
  for (int r = 0; r < 5; ++r) {
    double s = 0.0;
    for (int j = 0; j < 7; ++j) s += std::exp(y[static_cast<std::size_t>(r) * 7 + j]);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_THROW(tape.log_softmax(Tensor({3, 1}, {1, 2, 3})), std::invalid_argument);
}

TEST(LogSoftmax, GradMatchesFiniteDifferences) {
  Rng rng(31);
  Tensor x = rand_tensor({3, 5}, rng, -2.0, 2.0);
  auto f = [&](Tape& t, const Tensor& v) {
    Rng local(5);
    return pick(t, t.log_softmax(v), local);
  };
  EXPECT_LT(grad_check(f, x, 1e-5), 1e-7);
}

TEST(Permute, RoundTripAndGrad) {
  Tape tape;
  Rng rng(37);
  Tensor x = rand_tensor({2, 3, 4, 5}, rng);
  Tensor y = tape.permute(x, {0, 2, 3, 1});
  EXPECT_EQ(y.shape(), (Shape{2, 4, 5, 3}));
  Tensor back = tape.permute(y, {0, 3, 1, 2});
  EXPECT_TRUE(back.bitwise_equal(x));

  auto f = [&](Tape& t, const Tensor& v) {
    Rng local(5);
    return pick(t, t.permute(v, {0, 2, 3, 1}), local);
  };
  EXPECT_LT(grad_check(f, x, 1e-5), 1e-7);
}

TEST(Backward, SquareAtThree) {
  Tape tape;
  Tensor x = tape.param(Tensor({1}, {3}));
  Tensor loss = tape.mul(x, x);
  auto grads = tape.backward(loss);
  EXPECT_EQ(grads.at(x.node())[0], 6.0);
}

TEST(Backward, DisconnectedParameterGetsExactZero) {
  Tape tape;
  Tensor x = tape.param(Tensor({1}, {3}));
  Tensor p = tape.param(Tensor({2}, {1, 1}));
  Tensor loss = tape.mul(x, x);
  auto grads = tape.backward(loss);
  EXPECT_EQ(grads.at(p.node())[0], 0.0);
  EXPECT_EQ(grads.at(p.node())[1], 0.0);
}

TEST(Backward, NonScalarLossThrows) {
  Tape tape;
  Tensor x = tape.param(Tensor({2}, {1, 2}));
  Tensor y = tape.add(x, x);
  EXPECT_THROW(tape.backward(y), std::invalid_argument);
  EXPECT_THROW(tape.backward(Tensor({1}, {1.0})), std::invalid_argument);  // off-tape
}

TEST(Backward, ThreeLayerCompositeMatchesFiniteDifferences) {
  Rng rng(41);
  Tensor x = rand_tensor({1, 6, 6}, rng);
  Tensor k1 = rand_tensor({4, 1, 3, 3}, rng);
  Tensor b1 = rand_tensor({4}, rng, -0.1, 0.1);
  Tensor k2 = rand_tensor({4, 4, 3, 3}, rng);
  Tensor b2 = rand_tensor({4}, rng, -0.1, 0.1);
  auto net = [&](Tape& t, const Tensor& v) {
    Tensor h = t.relu(t.conv2d(v, k1, b1, PadMode::kZero, 1, 1));
    h = t.sigmoid(t.conv2d(h, k2, b2, PadMode::kReflect, 1, 1));
    return t.mean(h);
  };
  auto res = grad_check_detail(net, x, 1e-5);
  EXPECT_LT(res.max_rel_err, 1e-6);
  EXPECT_GT(res.checked, 0u);
}

TEST(Backward, SumOfLossesIsLinear) {
  Rng rng(43);
  Tape tape;
  Tensor x = tape.param(rand_tensor({3, 3}, rng));
  Tensor l1 = tape.mean(tape.mul(x, x));
  Tensor l2 = tape.sum(tape.relu(x));
  Tensor total = tape.add(l1, l2);
  auto g1 = tape.backward(l1);
  auto g2 = tape.backward(l2);
  auto gt = tape.backward(total);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_NEAR(gt.at(x.node())[i], g1.at(x.node())[i] + g2.at(x.node())[i], 1e-15);
  }
}

TEST(Backward, ReplayIsBitIdentical) {
  Rng rng(47);
  Tape tape;
  Tensor x = tape.param(rand_tensor({4, 4}, rng));
  Tensor loss = tape.mean(tape.sigmoid(tape.mul(x, x)));
  auto g1 = tape.backward(loss);
  auto g2 = tape.backward(loss);
  EXPECT_TRUE(g1.at(x.node()).bitwise_equal(g2.at(x.node())));
}

TEST(GradCheck, LinearFunctionIsMachinePrecision) {
  Rng rng(53);
  Tensor c = rand_tensor({8}, rng);
  Tensor x = rand_tensor({8}, rng);
  auto f = [&](Tape& t, const Tensor& v) { return t.sum(t.mul(v, c)); };
  EXPECT_LT(grad_check(f, x, 1e-5), 1e-10);
}

TEST(GradCheck, SumOfSquares) {
  Rng rng(59);
  Tensor x = rand_tensor({16}, rng);
  auto f = [](Tape& t, const Tensor& v) { return t.sum(t.mul(v, v)); };
  EXPECT_LT(grad_check(f, x, 1e-5), 1e-8);
}

TEST(GradCheck, ReluKinkIsExcluded) {
  // An element sitting exactly on the kink is skipped, not failed.
  Tensor x({3}, {-1.0, 0.0, 1.0});
  auto f = [](Tape& t, const Tensor& v) { return t.sum(t.relu(v)); };
  auto res = grad_check_detail(f, x, 1e-5);
  EXPECT_EQ(res.excluded, 1u);
  EXPECT_EQ(res.checked, 2u);
  EXPECT_LT(res.max_rel_err, 1e-10);
}

TEST(Primitives, FiveSeedSweepAllUnderTolerance) {
  // A fast slice of the full 50-seed battery that the acceptance suite runs.
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    Tensor a = rand_tensor({3, 4}, rng);
    Tensor b = rand_tensor({3, 4}, rng);
    auto cases = std::vector<ScalarFn>{
        [&](Tape& t, const Tensor& v) { Rng l(seed); return pick(t, t.add(v, b), l); },
        [&](Tape& t, const Tensor& v) { Rng l(seed); return pick(t, t.sub(b, v), l); },
        [&](Tape& t, const Tensor& v) { Rng l(seed); return pick(t, t.mul(v, b), l); },
        [&](Tape& t, const Tensor& v) { Rng l(seed); return pick(t, t.scale(v, 1.7), l); },
        [&](Tape& t, const Tensor& v) { Rng l(seed); return pick(t, t.sigmoid(v), l); },
        [&](Tape& t, const Tensor& v) { Rng l(seed); return pick(t, t.relu(v), l); },
    };
    for (auto& f : cases) {
      auto res = grad_check_detail(f, a, 1e-5);
      EXPECT_LT(res.max_rel_err, 1e-6) << "seed " << seed;
    }
  }
}
