#include <gtest/gtest.h>

#include <cmath>

#include "gklab/compute/grad_check.hpp"
#include "gklab/compute/rng.hpp"
#include "gklab/compute/tape.hpp"

using namespace gklab::compute;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform() * 2.0 - 1.0;
  return t;
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  auto out = matmul(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{3, 4}, {5, 6}}));
  EXPECT_EQ(out, Tensor::matrix({{3, 4}, {5, 6}}));
}

TEST(Matmul, RowTimesColumn) {
  auto out = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  EXPECT_EQ(out.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(out.item(), 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(7);
  Tensor a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
  Tensor out = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) s += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(out.at(i, j), s, 1e-12);
    }
  EXPECT_LE(max_abs_diff(matmul_nt(a, transpose(b)), out), 1e-12);
  EXPECT_LE(max_abs_diff(matmul_tn(transpose(a), b), out), 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos);
  }
}

TEST(Softmax, UniformOnEqualInputs) {
  auto out = softmax(Tensor::vector({0, 0, 0}), 0);
  for (double v : out.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, SaturatesWithoutOverflow) {
  auto out = softmax(Tensor::vector({1000, 0, 0}), 0);
  EXPECT_NEAR(out[0], 1.0, 1e-12);
  EXPECT_NEAR(out[1], 0.0, 1e-12);
  EXPECT_TRUE(out.all_finite());
}

TEST(Softmax, MatchesExpNormalize) {
  auto out = softmax(Tensor::vector({1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(out[0], std::exp(1.0) / z, 1e-12);
  EXPECT_NEAR(out[1], std::exp(2.0) / z, 1e-12);
  EXPECT_NEAR(out[2], std::exp(3.0) / z, 1e-12);
}

TEST(Softmax, SlicesSumToOneAndShiftInvariant) {
  Rng rng(3);
  Tensor x = random_tensor({4, 6}, rng);
  for (std::size_t axis : {0u, 1u}) {
    Tensor y = softmax(x, axis);
    Tensor shifted = x;
    // Shift each slice along `axis` by its own constant.
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 6; ++c) shifted.at(r, c) += 17.5 * static_cast<double>(axis == 1 ? r : c);
    EXPECT_LE(max_abs_diff(softmax(shifted, axis), y), 1e-10);
    if (axis == 1) {
      for (std::size_t r = 0; r < 4; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 6; ++c) s += y.at(r, c);
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    } else {
      for (std::size_t c = 0; c < 6; ++c) {
        double s = 0;
        for (std::size_t r = 0; r < 4; ++r) s += y.at(r, c);
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    }
  }
}

TEST(Backward, SumGivesOnes) {
  Tape tape;
  auto x = tape.leaf(Tensor({2, 3}, {1, -2, 3, 0.5, 7, -1}));
  auto loss = tape.sum(x);
  const ValueId wanted[] = {x};
  auto g = tape.backward(loss, wanted);
  EXPECT_EQ(g.at(x), Tensor::full({2, 3}, 1.0));
}

TEST(Backward, QuadraticGivesTwoX) {
  Tape tape;
  Tensor xv = Tensor::vector({1.5, -2.0, 0.25});
  auto x = tape.leaf(xv);
  auto loss = tape.sum(tape.mul(x, x));
  const ValueId wanted[] = {x};
  auto g = tape.backward(loss, wanted).at(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g[i], 2 * xv[i]);
}

TEST(Backward, CompositeMatchesCentralDifferences) {
  Rng rng(11);
  Tensor w = random_tensor({4, 3}, rng);
  ScalarFn f = [&](Tape& t, ValueId x) {
    auto h = t.gelu(t.matmul(x, t.borrow(w)));
    return t.pick(t.softmax(h, 1), 4);
  };
  Tensor x = random_tensor({2, 4}, rng);
  EXPECT_LE(grad_check(f, x, 1e-5), 1e-6);
}

TEST(Backward, EveryPrimitiveMatchesFiniteDifferences) {
  Rng rng(5);
  Tensor other = random_tensor({3, 3}, rng);
  Tensor row = random_tensor({1, 3}, rng);
  std::vector<ScalarFn> fns = {
      [&](Tape& t, ValueId x) { return t.sum(t.matmul(x, t.borrow(other))); },
      [&](Tape& t, ValueId x) { return t.sum(t.mul(t.matmul_nt(x, t.borrow(other)), t.borrow(other))); },
      [&](Tape& t, ValueId x) { return t.sum(t.mul(t.add(x, x), t.sub(x, t.borrow(other)))); },
      [&](Tape& t, ValueId x) { return t.mean(t.scale(t.mul(x, x), 0.7)); },
      [&](Tape& t, ValueId x) { return t.sum(t.mul(t.gelu(x), t.borrow(other))); },
      [&](Tape& t, ValueId x) { return t.sum(t.mul(t.softmax(x, 0), t.borrow(other))); },
      [&](Tape& t, ValueId x) { return t.sum(t.mul(t.log_softmax(x), t.borrow(other))); },
      [&](Tape& t, ValueId x) { return t.sum(t.mul(t.gather(x, {2, 0, 2}), t.borrow(other))); },
      [&](Tape& t, ValueId x) {
        return t.sum(t.mul(t.replace_row(x, t.scale(t.gather(x, {0}), 3.0), 1), t.borrow(other)));
      },
      [&](Tape& t, ValueId x) {
        return t.sum(t.mul(t.select(x, t.mul(x, x), {1, 0, 0, 1, 1, 0, 0, 0, 1}), t.borrow(other)));
      },
      [&](Tape& t, ValueId x) { return t.pick(t.copy(t.mul(x, x)), 5); },
  };
  for (std::size_t i = 0; i < fns.size(); ++i) {
    EXPECT_LE(grad_check(fns[i], random_tensor({3, 3}, rng), 1e-5), 1e-6) << "primitive case " << i;
  }
}

TEST(Backward, UnknownSlotRaises) {
  Tape a, b;
  auto x = a.leaf(Tensor::scalar(1.0));
  auto loss = a.sum(x);
  b.leaf(Tensor::scalar(2.0));
  const ValueId foreign[] = {ValueId{99}};
  EXPECT_THROW(a.backward(loss, foreign), UnknownSlotError);
  EXPECT_THROW(b.value(ValueId{5}), UnknownSlotError);
}

TEST(Backward, NonScalarLossRaises) {
  Tape t;
  auto x = t.leaf(Tensor::vector({1, 2}));
  const ValueId wanted[] = {x};
  EXPECT_THROW(t.backward(x, wanted), ContractError);
}

TEST(Backward, UnrelatedValueGetsZeroGradient) {
  Tape t;
  auto x = t.leaf(Tensor::vector({1, 2}));
  auto y = t.leaf(Tensor::vector({3, 4}));
  auto loss = t.sum(x);
  const ValueId wanted[] = {y};
  EXPECT_EQ(t.backward(loss, wanted).at(y), Tensor({2}));
}

TEST(Backward, DoesNotMutateValues) {
  Tape t;
  auto x = t.leaf(Tensor::vector({1, 2}));
  auto h = t.gelu(x);
  Tensor before = t.value(h);
  auto loss = t.sum(h);
  const ValueId wanted[] = {x, h};
  t.backward(loss, wanted);
  EXPECT_EQ(t.value(h), before);
}

TEST(GradCheck, SumIsExact) {
  ScalarFn f = [](Tape& t, ValueId x) { return t.sum(x); };
  EXPECT_LE(grad_check(f, Tensor::vector({0.3, -1.2, 4.0}), 1e-5), 1e-9);
}

TEST(GradCheck, SoftmaxPickFirst) {
  ScalarFn f = [](Tape& t, ValueId x) { return t.pick(t.softmax(x, 0), 0); };
  Tensor x = Tensor::vector({0.1, 0.2, 0.3});
  // Analytic Jacobian row: s0 (δ0j − sj).
  Tensor s = softmax(x, 0);
  Tensor row({3});
  for (std::size_t j = 0; j < 3; ++j) row[j] = s[0] * ((j == 0 ? 1.0 : 0.0) - s[j]);
  EXPECT_LE(grad_check(f, x, 1e-5), 1e-6);
  EXPECT_LE(grad_check_against(f, x, row, 1e-5), 1e-6);
}

TEST(GradCheck, CorruptedGradientIsDetected) {
  ScalarFn f = [](Tape& t, ValueId x) { return t.sum(t.mul(x, x)); };
  Tensor x = Tensor::vector({0.5, -0.25, 1.0});
  Tensor wrong({3});
  for (std::size_t i = 0; i < 3; ++i) wrong[i] = 2 * x[i] + 0.1;
  EXPECT_GE(grad_check_against(f, x, wrong, 1e-5), 0.05);
}

TEST(GradCheck, NonScalarOutputRaises) {
  ScalarFn f = [](Tape& t, ValueId x) { return t.gelu(x); };
  EXPECT_THROW(grad_check(f, Tensor::vector({1, 2}), 1e-5), ContractError);
}

TEST(Tape, ReplayIsBitExact) {
  Rng rng(9);
  Tensor w = random_tensor({3, 3}, rng);
  Tape t;
  auto x = t.leaf(random_tensor({2, 3}, rng));
  auto h = t.softmax(t.gelu(t.matmul(x, t.borrow(w))), 1);
  t.sum(t.log_softmax(h));
  auto replayed = t.replay();
  ASSERT_EQ(replayed.size(), t.size());
  for (std::uint32_t i = 0; i < t.size(); ++i) EXPECT_EQ(replayed[i], t.value(ValueId{i}));
}

TEST(Rng, SplitStreamsAreIndependentOfParentDraws) {
  Rng a(42), b(42);
  a.next_u64();
  a.next_u64();
  EXPECT_EQ(a.split(3).next_u64(), b.split(3).next_u64());
  EXPECT_NE(b.split(3).next_u64(), b.split(4).next_u64());
  Rng c(42);
  EXPECT_EQ(Rng(42).next_u64(), c.next_u64());
}

TEST(Rng, UniformAndBelowInRange) {
  Rng r(1);
  double mean = 0;
  for (int i = 0; i < 10000; ++i) {
    double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    mean += u;
    ASSERT_LT(r.below(7), 7u);
  }
  EXPECT_NEAR(mean / 10000, 0.5, 0.02);
}
