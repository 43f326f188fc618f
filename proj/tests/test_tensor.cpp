#include "kinediff/errors.h"
#include "kinediff/tensor.h"
#include "test_support.h"

#include <gtest/gtest.h>

#include <cmath>

namespace kinediff {
namespace {

using testing::check_gradients;
using testing::random_tensor;

void expect_grads_ok(const std::vector<testing::GradCheck>& checks, double tol = 1e-6) {
  for (const auto& c : checks) {
    EXPECT_LT(c.rel_err, tol) << c.name << " (|grad| = " << c.analytic_norm << ")";
  }
}

TEST(Tensor, BroadcastShapes) {
  EXPECT_EQ(broadcast_shapes({2, 3}, {3}), (Shape{2, 3}));
  EXPECT_EQ(broadcast_shapes({4, 1, 3}, {2, 1}), (Shape{4, 2, 3}));
  EXPECT_EQ(broadcast_shapes({}, {5}), (Shape{5}));
  EXPECT_THROW(broadcast_shapes({2, 3}, {4}), DimensionError);
}

TEST(Tensor, BroadcastAddMatchesHandComputed) {
  const Tensor a(Shape{2, 1}, {1.0, 2.0});
  const Tensor b(Shape{3}, {10.0, 20.0, 30.0});
  const Tensor c = a + b;
  ASSERT_EQ(c.shape(), (Shape{2, 3}));
  const std::vector<double> expect = {11, 21, 31, 12, 22, 32};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_DOUBLE_EQ(c.values()[i], expect[i]);
  }
}

TEST(Tensor, MatmulMatchesLoopOracle) {
  Rng rng(3);
  const Tensor a = random_tensor({2, 3, 4}, rng);
  const Tensor b = random_tensor({4, 5}, rng);
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
          s += a.at({n, i, k}) * b.at({k, j});
        }
        EXPECT_NEAR(c.at({n, i, j}), s, 1e-12);
      }
    }
  }
}

TEST(Tensor, BatchedMatmulBroadcastsLeadingAxes) {
  Rng rng(4);
  const Tensor a = random_tensor({3, 1, 2, 4}, rng);
  const Tensor b = random_tensor({2, 4, 3}, rng);
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 2, 2, 3}));
  double s = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    s += a.at({2, 0, 1, k}) * b.at({1, k, 2});
  }
  EXPECT_NEAR(c.at({2, 1, 1, 2}), s, 1e-12);
}

TEST(Tensor, ElementwiseGradients) {
  Rng rng(5);
  Tensor a = random_tensor({2, 3}, rng, 1.0, true);
  Tensor b = random_tensor({3}, rng, 1.0, true);
  Tensor c = Tensor::parameter({2, 1}, {1.5, 2.5});
  auto f = [&] { return sum(square(a * b - c / (b * b + 1.0)) + (-a) * 0.5 + 2.0 * c); };
  expect_grads_ok(check_gradients(f, {{"a", a}, {"b", b}, {"c", c}}));
}

TEST(Tensor, UnaryGradients) {
  Rng rng(6);
  Tensor x = random_tensor({7}, rng, 1.0, true);
  auto f = [&] { return sum(gelu(x) * exp(x * 0.3) + sqrt(square(x) + 1.0)); };
  expect_grads_ok(check_gradients(f, {{"x", x}}));
}

TEST(Tensor, MatmulAndLinearGradients) {
  Rng rng(7);
  Tensor a = random_tensor({2, 3, 4}, rng, 1.0, true);
  Tensor w = random_tensor({4, 2}, rng, 1.0, true);
  Tensor bias = random_tensor({2}, rng, 1.0, true);
  Tensor b3 = random_tensor({2, 4, 3}, rng, 1.0, true);
  auto f = [&] { return sum(square(linear(a, w, bias))) + sum(matmul(a, b3) * matmul(a, b3)) + mean(matmul(a, w)); };
  expect_grads_ok(check_gradients(f, {{"a", a}, {"w", w}, {"bias", bias}, {"b3", b3}}));
}

TEST(Tensor, LargeBatchedMatmulGradients) {
  // Above the small-product threshold the blocked path is used.
  Rng rng(8);
  Tensor a = random_tensor({2, 50, 50}, rng, 0.1, true);
  Tensor b = random_tensor({2, 50, 50}, rng, 0.1, true);
  auto f = [&] { return sum(square(matmul(a, b))); };
  const Tensor l = f();
  l.backward();
  // d/dA sum((AB)^2) = 2 (AB) B^T, checked on one entry by hand.
  const Tensor ab = matmul(a.detach(), b.detach());
  double expect = 0.0;
  for (std::size_t j = 0; j < 50; ++j) {
    expect += 2.0 * ab.at({1, 3, j}) * b.at({1, 7, j});
  }
  EXPECT_NEAR(a.grad()[50 * 50 + 3 * 50 + 7], expect, 1e-10);
}

TEST(Tensor, ShapeOpGradients) {
  Rng rng(9);
  Tensor x = random_tensor({2, 3, 4}, rng, 1.0, true);
  Tensor y = random_tensor({2, 1, 4}, rng, 1.0, true);
  Shape r{4, 6};
  auto f = [&] {
    const Tensor p = permute(x, {2, 0, 1});
    const Tensor t = transpose(x, 0, 2);
    const Tensor c = concat({x, y}, 1);
    const Tensor g = gather(x, 1, {2, 0, 2});
    return sum(square(p) * 0.5) + sum(t * t * t) + sum(square(c)) + sum(g * g) + sum(square(reshape(x, r)));
  };
  expect_grads_ok(check_gradients(f, {{"x", x}, {"y", y}}));
}

TEST(Tensor, ReductionGradients) {
  Rng rng(10);
  Tensor x = random_tensor({3, 4, 2}, rng, 1.0, true);
  auto g = [&] { return sum(square(sum(x, 1))) + sum(square(mean(x, 2, true))) + square(mean(x)) + sum(square(mean(x, 0))); };
  expect_grads_ok(check_gradients(g, {{"x", x}}));
}

TEST(Tensor, SoftmaxRowsSumToOneAndGradients) {
  Rng rng(11);
  Tensor x = random_tensor({2, 5}, rng, 3.0, true);
  const Tensor s = softmax(x, 1);
  for (std::size_t r = 0; r < 2; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      total += s.at({r, c});
    }
    EXPECT_NEAR(total, 1.0, 1e-14);
  }
  Tensor w = random_tensor({2, 5}, rng);
  auto f = [&] { return sum(softmax(x, 1) * w) + sum(square(softmax(x, 0))); };
  expect_grads_ok(check_gradients(f, {{"x", x}}));
}

TEST(Tensor, SoftmaxIsStableForLargeInputs) {
  const Tensor x(Shape{3}, {1000.0, 1000.0, -1000.0});
  const Tensor s = softmax(x, 0);
  EXPECT_NEAR(s.values()[0], 0.5, 1e-15);
  EXPECT_NEAR(s.values()[2], 0.0, 1e-15);
}

TEST(Tensor, LayerNormMatchesFormulaAndGradients) {
  Rng rng(12);
  Tensor x = random_tensor({3, 6}, rng, 2.0, true);
  Tensor g = random_tensor({6}, rng, 1.0, true);
  Tensor b = random_tensor({6}, rng, 1.0, true);
  const Tensor y = layer_norm(x, g, b);
  double mu = 0.0;
  for (std::size_t c = 0; c < 6; ++c) {
    mu += x.at({1, c}) / 6.0;
  }
  double var = 0.0;
  for (std::size_t c = 0; c < 6; ++c) {
    var += (x.at({1, c}) - mu) * (x.at({1, c}) - mu) / 6.0;
  }
  EXPECT_NEAR(y.at({1, 4}), (x.at({1, 4}) - mu) / std::sqrt(var + 1e-5) * g.at({4}) + b.at({4}), 1e-12);
  Tensor w = random_tensor({3, 6}, rng);
  auto f = [&] { return sum(layer_norm(x, g, b) * w); };
  expect_grads_ok(check_gradients(f, {{"x", x}, {"gamma", g}, {"beta", b}}));
}

TEST(Tensor, LayerNormOnlyGammaRequiresGrad) {
  Rng rng(13);
  Tensor x = random_tensor({2, 4}, rng);
  Tensor g = random_tensor({4}, rng, 1.0, true);
  const Tensor beta(Shape{4}, 0.0);
  auto f = [&] { return sum(square(layer_norm(x, g, beta))); };
  expect_grads_ok(check_gradients(f, {{"gamma", g}}));
  EXPECT_FALSE(beta.has_grad());
}

TEST(Tensor, NormLastHasZeroGradientAtOrigin) {
  Tensor x = Tensor::parameter({2, 3}, {0, 0, 0, 3, 4, 0});
  const Tensor n = norm_last(x);
  EXPECT_DOUBLE_EQ(n.values()[0], 0.0);
  EXPECT_DOUBLE_EQ(n.values()[1], 5.0);
  sum(n).backward();
  const auto g = x.grad();
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_NEAR(g[3], 0.6, 1e-15);
  EXPECT_NEAR(g[4], 0.8, 1e-15);
}

TEST(Tensor, NormLastGradients) {
  Rng rng(14);
  Tensor x = random_tensor({4, 3}, rng, 1.0, true);
  auto f = [&] { return sum(square(norm_last(x)) + norm_last(x)); };
  expect_grads_ok(check_gradients(f, {{"x", x}}));
}

TEST(Tensor, GradientsAccumulateAcrossBackwardCalls) {
  Tensor x = Tensor::parameter({1}, {2.0});
  sum(square(x)).backward();
  sum(square(x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Tensor, SharedSubexpressionGetsBothContributions) {
  Tensor x = Tensor::parameter({1}, {3.0});
  const Tensor y = x * x;
  sum(y + y * x).backward(); // d/dx (x^2 + x^3) = 2x + 3x^2
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0 + 27.0);
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::parameter({2}, {1.0, 2.0});
  Tensor y;
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    y = square(x);
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, ContractViolations) {
  const Tensor x(Shape{2}, {1.0, 2.0});
  EXPECT_THROW(x.backward(), ContractError);
  EXPECT_THROW(x.item(), ContractError);
  EXPECT_THROW(matmul(Tensor(Shape{2, 3}), Tensor(Shape{2, 3})), DimensionError);
  EXPECT_THROW(reshape(x, {3}), DimensionError);
  EXPECT_THROW(permute(Tensor(Shape{2, 3}), {0, 0}), DimensionError);
  EXPECT_THROW(gather(x, 0, {2}), DimensionError);
}

TEST(Tensor, NonFiniteResultsRaiseNumericError) {
  const Tensor big(Shape{1}, {1000.0});
  EXPECT_THROW(exp(big), NumericError);
  const Tensor neg(Shape{1}, {-1.0});
  EXPECT_THROW(sqrt(neg), NumericError);
  const Tensor zero(Shape{1}, {0.0});
  EXPECT_THROW(Tensor(Shape{1}, {1.0}) / zero, NumericError);
}

} // namespace
} // namespace kinediff
