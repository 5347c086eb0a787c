#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "stpark/errors.hpp"
#include "stpark/gradcheck.hpp"
#include "stpark/ops.hpp"
#include "stpark/tensor.hpp"

using namespace stpark;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

void expect_values(const Tensor& t, const std::vector<double>& expected, double tol = 0.0) {
  ASSERT_EQ(t.numel(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t.data()[i], expected[i], tol) << "entry " << i;
}

}  // namespace

TEST(Matmul, IdentityAndDirectProduct) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
  expect_values(matmul(eye, b), {3, 4, 5, 6});
  const Tensor row = Tensor::from({1, 2}, {1, 2});
  const Tensor col = Tensor::from({2, 1}, {3, 4});
  const Tensor out = matmul(row, col);
  EXPECT_EQ(out.shape(), (Shape{1, 1}));
  EXPECT_EQ(out.item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2,3)"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTranspose) {
  Tensor a = random_tensor({3, 4}, 1, true);
  const Tensor b = random_tensor({4, 2}, 2);
  sum(matmul(a, b)).backward();
  const auto g = a.grad();
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      const double expected = b.data()[k * 2] + b.data()[k * 2 + 1];
      EXPECT_NEAR(g[i * 4 + k], expected, 1e-15);
    }
  }
  Tensor a2 = random_tensor({3, 4}, 1);
  const auto res = finite_diff_check([&] { return sum(matmul(a2, b)); }, {a2});
  EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(Matmul, BatchedBroadcastGradients) {
  Tensor a = random_tensor({2, 3, 3, 4}, 3);
  Tensor b = random_tensor({3, 4, 2}, 4);
  const Tensor w = random_tensor({2, 3, 3, 2}, 5);
  const auto res = finite_diff_check([&] { return sum(mul(matmul(a, b), w)); }, {a, b});
  EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(Elementwise, ArithmeticExamples) {
  expect_values(add(Tensor::from({2}, {1, 2}), Tensor::from({2}, {0, 0})), {1, 2});
  expect_values(mul(Tensor::from({2}, {2, 3}), Tensor::from({2}, {4, 5})), {8, 15});
  EXPECT_EQ(gelu(Tensor::scalar(0.0)).item(), 0.0);
}

TEST(Elementwise, BroadcastAndErrors) {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from({3}, {10, 20, 30});
  expect_values(add(a, b), {11, 22, 33, 14, 25, 36});
  const Tensor col = Tensor::from({2, 1}, {1, 2});
  expect_values(mul(a, col), {1, 2, 3, 8, 10, 12});
  EXPECT_THROW(add(a, Tensor::zeros({2})), DimensionError);
}

TEST(Elementwise, NanIsAnError) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(mul(Tensor::scalar(inf), Tensor::scalar(0.0)), NumericError);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Tensor a = random_tensor({3, 4}, 6);
  Tensor b = random_tensor({4}, 7);
  const auto res = finite_diff_check(
      [&] { return sum(mul(gelu(sub(a, b)), relu(add(a, scale(b, 0.5))))); }, {a, b});
  EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(ConcatSplit, LayoutAndSizes) {
  const Tensor a = Tensor::from({2, 1}, {1, 2});
  const Tensor b = Tensor::from({2, 1}, {3, 4});
  const Tensor c = concat({a, b}, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  expect_values(c, {1, 3, 2, 4});
  const auto parts = split(Tensor::zeros({2, 3}), {2, 1}, 1);
  EXPECT_EQ(parts[0].shape(), (Shape{2, 2}));
  EXPECT_EQ(parts[1].shape(), (Shape{2, 1}));
  EXPECT_THROW(split(Tensor::zeros({2, 3}), {2, 2}, 1), DimensionError);
  EXPECT_THROW(concat({Tensor::zeros({2, 1}), Tensor::zeros({3, 1})}, 1), DimensionError);
}

TEST(ConcatSplit, RoundTripIsBitwise) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t axis = rng() % 3;
    std::vector<Tensor> parts;
    std::vector<std::size_t> sizes;
    const std::size_t count = 1 + rng() % 4;
    for (std::size_t p = 0; p < count; ++p) {
      Shape s{2, 3, 4};
      s[axis] = 1 + rng() % 3;
      sizes.push_back(s[axis]);
      parts.push_back(random_tensor(s, rng()));
    }
    const Tensor joined = concat(parts, axis);
    const auto back = split(joined, sizes, axis);
    for (std::size_t p = 0; p < count; ++p) {
      ASSERT_EQ(back[p].shape(), parts[p].shape());
      EXPECT_EQ(back[p].to_vector(), parts[p].to_vector());
    }
    const Tensor rejoined = concat(back, axis);
    EXPECT_EQ(rejoined.to_vector(), joined.to_vector());
  }
}

TEST(ConcatSplit, BackwardRoutesSlices) {
  Tensor a = random_tensor({2, 2}, 12);
  Tensor b = random_tensor({2, 3}, 13);
  const Tensor w = random_tensor({2, 5}, 14);
  const auto res = finite_diff_check([&] {
    const auto parts = split(mul(concat({a, b}, 1), w), {1, 4}, 1);
    return add(sum(parts[0]), scale(sum(mul(parts[1], parts[1])), 0.5));
  }, {a, b});
  EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(Softmax, Examples) {
  const double inf = std::numeric_limits<double>::infinity();
  expect_values(softmax(Tensor::from({2}, {0, 0}), 0), {0.5, 0.5});
  const Tensor masked = softmax(Tensor::from({2}, {0, -inf}), 0);
  EXPECT_EQ(masked.data()[0], 1.0);
  EXPECT_EQ(masked.data()[1], 0.0);
  expect_values(softmax(Tensor::from({2}, {1000, 1000}), 0), {0.5, 0.5});
  EXPECT_THROW(softmax(Tensor::from({2}, {-inf, -inf}), 0), NumericError);
}

TEST(Softmax, RowsAreDistributions) {
  const Tensor x = scale(random_tensor({4, 5, 6}, 15), 30.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const Tensor y = softmax(x, axis);
    const Shape& s = y.shape();
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < 3; ++i) inner *= s[i];
    const std::size_t outer = y.numel() / (s[axis] * inner);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < s[axis]; ++j) {
          const double v = y.data()[(o * s[axis] + j) * inner + i];
          EXPECT_GE(v, 0.0);
          total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
      }
    }
  }
}

TEST(Softmax, MaskedEntryHasZeroGradient) {
  const double inf = std::numeric_limits<double>::infinity();
  Tensor x = Tensor::from({3}, {0.3, -0.2, 0.1}, true);
  const Tensor mask = Tensor::from({3}, {0, 0, -inf});
  const Tensor w = Tensor::from({3}, {1.0, 2.0, 3.0});
  sum(mul(softmax(add(x, mask), 0), w)).backward();
  EXPECT_EQ(x.grad()[2], 0.0);
  EXPECT_NE(x.grad()[0], 0.0);
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  Tensor x = random_tensor({3, 4}, 16);
  const Tensor w = random_tensor({3, 4}, 17);
  const auto res = finite_diff_check([&] { return sum(mul(softmax(x, 1), w)); }, {x});
  EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(LayerNorm, ConstantSliceAndClosedForm) {
  const Tensor gain = Tensor::full({3}, 1.0);
  const Tensor bias = Tensor::zeros({3});
  expect_values(layer_norm(Tensor::from({3}, {5, 5, 5}), gain, bias), {0, 0, 0});
  // mean 0, variance 1: (x - 0) / sqrt(1 + 1e-5)
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  expect_values(layer_norm(Tensor::from({2}, {1, -1}), Tensor::full({2}, 1.0), Tensor::zeros({2})),
                {expected, -expected}, 1e-15);
  EXPECT_THROW(layer_norm(Tensor::zeros({2, 0}), Tensor::zeros({0}), Tensor::zeros({0})), DimensionError);
}

TEST(LayerNorm, NormalizedMoments) {
  const Tensor x = scale(random_tensor({5, 8}, 18), 7.0);
  const Tensor y = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 0.0);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0.0;
    double v = 0.0;
    for (std::size_t j = 0; j < 8; ++j) m += y.data()[r * 8 + j];
    m /= 8;
    for (std::size_t j = 0; j < 8; ++j) v += (y.data()[r * 8 + j] - m) * (y.data()[r * 8 + j] - m);
    v /= 8;
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-9);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Tensor x = random_tensor({4, 6}, 19);
  Tensor gain = random_tensor({6}, 20);
  Tensor bias = random_tensor({6}, 21);
  const Tensor w = random_tensor({4, 6}, 22);
  const auto res = finite_diff_check([&] { return sum(mul(layer_norm(x, gain, bias), w)); }, {x, gain, bias});
  EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(Backward, LinearityPowerRuleAndReuse) {
  Tensor x = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
  sum(x).backward();
  expect_values(Tensor::from({3}, x.grad()), {1, 1, 1});

  Tensor y = Tensor::from({2}, {1, 2}, true);
  sum(mul(y, y)).backward();
  expect_values(Tensor::from({2}, y.grad()), {2, 4});

  Tensor z = Tensor::scalar(3.0, true);
  add(z, z).backward();
  EXPECT_EQ(z.grad()[0], 2.0);
}

TEST(Backward, LeafUsedManyTimesAccumulatesEveryPath) {
  Tensor x = Tensor::scalar(1.5, true);
  Tensor acc = x;
  for (int k = 0; k < 4; ++k) acc = add(acc, x);  // 5x
  mul(acc, x).backward();                          // 5x^2 -> 10x
  EXPECT_DOUBLE_EQ(x.grad()[0], 15.0);
}

TEST(Backward, NonScalarLossIsAnError) {
  Tensor x = Tensor::zeros({2}, true);
  EXPECT_THROW(x.backward(), DimensionError);
}

TEST(Backward, CompositeMlpMatchesFiniteDifferences) {
  Tensor x = random_tensor({5, 3}, 30);
  Tensor w1 = random_tensor({3, 8}, 31);
  Tensor b1 = random_tensor({8}, 32);
  Tensor w2 = random_tensor({8, 2}, 33);
  Tensor b2 = random_tensor({2}, 34);
  const Tensor target = random_tensor({5, 2}, 35);
  auto loss = [&] {
    const Tensor h = gelu(linear(x, w1, b1));
    const Tensor d = sub(linear(h, w2, b2), target);
    return mean(mul(d, d));
  };
  const auto res = finite_diff_check(loss, {x, w1, b1, w2, b2});
  EXPECT_LT(res.max_relative_error, 1e-4);
  EXPECT_EQ(res.entries_checked, 15u + 24u + 8u + 16u + 2u);
}

TEST(Permute, ValuesAndGradient) {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  expect_values(transpose(a), {1, 4, 2, 5, 3, 6});
  Tensor x = random_tensor({2, 3, 4}, 36);
  const Tensor w = random_tensor({4, 2, 3}, 37);
  const auto res = finite_diff_check([&] { return sum(mul(permute(x, {2, 0, 1}), w)); }, {x});
  EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(Embedding, GatherAndScatter) {
  Tensor table = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  const std::vector<std::size_t> ids{2, 0, 2};
  const Tensor out = embedding(table, ids);
  expect_values(out, {5, 6, 1, 2, 5, 6});
  sum(out).backward();
  expect_values(Tensor::from({6}, table.grad()), {1, 1, 0, 0, 2, 2});
  const std::vector<std::size_t> bad{3};
  EXPECT_THROW(embedding(table, bad), DimensionError);
}

TEST(MaskedMae, Examples) {
  const Tensor y = Tensor::from({2}, {2, 4});
  EXPECT_EQ(masked_mae(y, y, Tensor::full({2}, 1.0)).item(), 0.0);
  const Tensor p = Tensor::from({2}, {1, 2});
  EXPECT_DOUBLE_EQ(masked_mae(p, y, Tensor::full({2}, 1.0)).item(), 1.5);
  EXPECT_DOUBLE_EQ(masked_mae(p, y, Tensor::from({2}, {1, 0})).item(), 1.0);
  EXPECT_THROW(masked_mae(p, y, Tensor::zeros({2})), DataError);
}

TEST(GradCheck, PolynomialIsExact) {
  Tensor w = Tensor::scalar(3.0);
  const auto res = finite_diff_check([&] { return mul(w, w); }, {w});
  EXPECT_NEAR(res.worst_analytic, 6.0, 1e-9);
  EXPECT_NEAR(res.worst_numeric, 6.0, 1e-9);
  EXPECT_EQ(w.item(), 3.0);
}

TEST(GradCheck, NonFiniteLossIsAnError) {
  Tensor w = Tensor::scalar(1.0);
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(finite_diff_check([&] { return add(w, Tensor::scalar(inf)); }, {w}), NumericError);
}
