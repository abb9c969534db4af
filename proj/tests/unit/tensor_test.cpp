#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pearl/error.hpp"
#include "pearl/tensor.hpp"

using namespace pearl;

namespace {

std::vector<double> grad_of(const Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Analytic vs central-difference gradient of f wrt every input.
void expect_gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                      std::vector<Tensor> inputs, double tol = 1e-6) {
  for (auto& in : inputs) in.zero_grad();
  f(inputs).backward();
  auto scalar_f = [&](const std::vector<Tensor>& xs) { return f(xs).item(); };
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    const auto numeric = oracle::finite_diff(scalar_f, inputs, i);
    EXPECT_LT(oracle::max_rel_err(grad_of(inputs[i]), numeric), tol) << "input " << i;
  }
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  std::mt19937_64 rng(1);
  const Tensor a = Tensor::randn({2, 3}, 1.0, rng);
  EXPECT_EQ(values(matmul(Tensor::eye(2), a)), values(a));
}

TEST(Matmul, SmallHandComputedProduct) {
  const Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from_data({2, 1}, {0, 1});
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(values(c), (std::vector<double>{2, 4}));
}

TEST(Matmul, ZeroMatrixGivesZero) {
  std::mt19937_64 rng(2);
  const Tensor a = Tensor::randn({3, 4}, 1.0, rng);
  for (double v : values(matmul(Tensor::zeros({2, 3}), a))) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Softmax, UniformInput) {
  const Tensor s = softmax(Tensor::zeros({3}), 0);
  for (double v : values(s)) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  const Tensor a = softmax(Tensor::from_data({2}, {0.3, 1.7}), 0);
  const Tensor b = softmax(Tensor::from_data({2}, {100.3, 101.7}), 0);
  EXPECT_NEAR(a.at(0) + a.at(1), 1.0, 1e-15);
  EXPECT_NEAR(a.at(0), b.at(0), 1e-12);
  EXPECT_NEAR(a.at(1), b.at(1), 1e-12);
}

TEST(Softmax, MatchesScalarFormula) {
  const Tensor s = softmax(Tensor::from_data({3}, {1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(s.at(0), std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(s.at(1), std::exp(2.0) / z, 1e-15);
  EXPECT_NEAR(s.at(2), std::exp(3.0) / z, 1e-15);
}

TEST(Softmax, AlongFirstAxisOfMatrix) {
  const Tensor s = softmax(Tensor::from_data({2, 2}, {0, 5, 0, 5}), 0);
  for (double v : values(s)) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(Softmax, NanInputThrows) {
  EXPECT_THROW(softmax(Tensor::from_data({2}, {0.0, std::nan("")}), 0), NumericError);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  const std::vector<int> labels{0, 3, 2};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({3, 5}), labels).item(), std::log(5.0), 1e-14);
}

TEST(CrossEntropy, HugeMarginIsNearZero) {
  const std::vector<int> labels{1};
  EXPECT_LT(cross_entropy(Tensor::from_data({1, 3}, {0, 1000, 0}), labels).item(), 1e-12);
}

TEST(CrossEntropy, MatchesNegativeLogSoftmax) {
  const std::vector<int> labels{2};
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(cross_entropy(Tensor::from_data({1, 3}, {1, 2, 3}), labels).item(),
              -std::log(std::exp(3.0) / z), 1e-14);
}

TEST(CrossEntropy, LabelOutOfRangeThrows) {
  const std::vector<int> bad{3};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), bad), IndexError);
  const std::vector<int> negative{-1};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), negative), IndexError);
}

TEST(Backward, SquareAtThree) {
  const Tensor x = Tensor::scalar(3.0, true);
  mul(x, x).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SumOfLinearMapGivesColumnSums) {
  std::mt19937_64 rng(3);
  const Tensor a = Tensor::randn({4, 3}, 1.0, rng);
  const Tensor x = Tensor::randn({3, 1}, 1.0, rng, true);
  sum(matmul(a, x)).backward();
  for (std::size_t j = 0; j < 3; ++j) {
    double col = 0;
    for (std::size_t i = 0; i < 4; ++i) col += a.at(i, j);
    EXPECT_NEAR(x.grad()[j], col, 1e-14);
  }
}

TEST(Backward, FrozenLeafGetsNoGrad) {
  const Tensor frozen = Tensor::full({2}, 1.0);
  const Tensor w = Tensor::full({2}, 2.0, true);
  sum(mul(frozen, w)).backward();
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_TRUE(w.has_grad());
}

TEST(Backward, NonScalarThrows) {
  const Tensor x = Tensor::full({2}, 1.0, true);
  EXPECT_THROW(scale(x, 2.0).backward(), ContractError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  const Tensor x = Tensor::scalar(2.0, true);
  const Tensor y = mul(x, x);
  add(y, y).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(Backward, NoGradGuardSkipsRecording) {
  const Tensor x = Tensor::scalar(2.0, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_THROW(y.backward(), ContractError);
}

TEST(FiniteDiff, SquareAtThree) {
  auto f = [](const std::vector<Tensor>& xs) { return xs[0].item() * xs[0].item(); };
  const auto g = oracle::finite_diff(f, {Tensor::scalar(3.0, true)}, 0, 1e-4);
  EXPECT_NEAR(g[0], 6.0, 1e-6);
}

TEST(FiniteDiff, ConstantFunctionIsZero) {
  auto f = [](const std::vector<Tensor>&) { return 4.0; };
  for (double v : oracle::finite_diff(f, {Tensor::full({3}, 1.0, true)}, 0)) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDiff, TwoLayerNetAgreesWithBackward) {
  std::mt19937_64 rng(4);
  const Tensor x = Tensor::randn({5, 3}, 1.0, rng);
  const std::vector<int> labels{0, 1, 2, 1, 0};
  auto net = [&](const std::vector<Tensor>& p) {
    return cross_entropy(add_bias(matmul(gelu(add_bias(matmul(x, p[0]), p[1])), p[2]), p[3]), labels);
  };
  expect_gradcheck(net, {Tensor::randn({3, 6}, 0.5, rng, true), Tensor::randn({6}, 0.5, rng, true),
                         Tensor::randn({6, 3}, 0.5, rng, true), Tensor::randn({3}, 0.5, rng, true)});
}

TEST(Gradcheck, ElementwiseAndReductions) {
  std::mt19937_64 rng(5);
  const Tensor a = Tensor::randn({3, 4}, 1.0, rng, true);
  const Tensor b = Tensor::randn({3, 4}, 1.0, rng, true);
  expect_gradcheck([](auto& p) { return sum(mul(sub(p[0], p[1]), add(p[0], p[1]))); }, {a, b});
  expect_gradcheck([](auto& p) { return mean(scale(mul(p[0], p[0]), -0.7)); }, {a});
  expect_gradcheck([](auto& p) { return sum(mul(relu(p[0]), p[0])); }, {a});
  expect_gradcheck([](auto& p) { return mean_abs_error(p[0], p[1]); }, {a, b});
}

TEST(Gradcheck, ShapeOps) {
  std::mt19937_64 rng(6);
  const Tensor a = Tensor::randn({4, 3}, 1.0, rng, true);
  const Tensor b = Tensor::randn({2, 3}, 1.0, rng, true);
  const Tensor w = Tensor::randn({6, 3}, 1.0, rng);
  expect_gradcheck([&](auto& p) { return sum(mul(concat({p[0], p[1]}), w)); }, {a, b});
  expect_gradcheck([&](auto& p) { return sum(mul(slice(p[0], 1, 3), p[1])); }, {a, b});
  expect_gradcheck([&](auto& p) { return sum(mul(gather_rows(p[0], {3, 0, 3, 1, 2, 0}), w)); }, {a});
  expect_gradcheck([&](auto& p) { return sum(mul(transpose(reshape(p[0], {3, 4})), reshape(p[0], {4, 3}))); },
                   {a});
  expect_gradcheck([&](auto& p) { return sum(mul(add_tiled(p[0], p[1]), slice(w, 0, 4))); },
                   {a, slice(b, 0, 1).detach().clone()});
}

TEST(Gradcheck, SoftmaxAndLayerNorm) {
  std::mt19937_64 rng(7);
  const Tensor x = Tensor::randn({3, 5}, 1.0, rng, true);
  const Tensor w = Tensor::randn({3, 5}, 1.0, rng);
  const Tensor gain = Tensor::randn({5}, 1.0, rng, true);
  const Tensor shift = Tensor::randn({5}, 1.0, rng, true);
  expect_gradcheck([&](auto& p) { return sum(mul(softmax(p[0], 1), w)); }, {x});
  expect_gradcheck([&](auto& p) { return sum(mul(softmax(p[0], 0), w)); }, {x});
  expect_gradcheck([&](auto& p) { return sum(mul(layer_norm(p[0], p[1], p[2]), w)); }, {x, gain, shift});
}

TEST(Gradcheck, AttentionWithAndWithoutPrefix) {
  std::mt19937_64 rng(8);
  const std::size_t batch = 2, seq = 3, d = 4, heads = 2, plen = 2;
  const Tensor q = Tensor::randn({batch * seq, d}, 1.0, rng, true);
  const Tensor k = Tensor::randn({batch * seq, d}, 1.0, rng, true);
  const Tensor v = Tensor::randn({batch * seq, d}, 1.0, rng, true);
  const Tensor pk = Tensor::randn({plen, d}, 1.0, rng, true);
  const Tensor pv = Tensor::randn({plen, d}, 1.0, rng, true);
  const Tensor w = Tensor::randn({batch * seq, d}, 1.0, rng);
  expect_gradcheck([&](auto& p) { return sum(mul(attention(p[0], p[1], p[2], p[3], p[4], batch, heads), w)); },
                   {q, k, v, pk, pv});
  expect_gradcheck([&](auto& p) { return sum(mul(attention(p[0], p[1], p[2], {}, {}, batch, heads), w)); },
                   {q, k, v});
}

TEST(TensorFactory, RejectsBadShapes) {
  EXPECT_THROW(Tensor::from_data({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::zeros({2, 0}), DimensionError);
}

TEST(TensorFactory, RandnIsSeeded) {
  std::mt19937_64 a(9), b(9);
  EXPECT_TRUE(Tensor::randn({3, 3}, 1.0, a).bitwise_equal(Tensor::randn({3, 3}, 1.0, b)));
}

TEST(Tensor, SetRequiresGradOnNonLeafThrows) {
  const Tensor x = Tensor::full({2}, 1.0, true);
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(y.set_requires_grad(false), ContractError);
}

TEST(Tensor, DetachBreaksGraph) {
  const Tensor x = Tensor::full({2}, 1.0, true);
  const Tensor y = scale(x, 2.0).detach();
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(values(y), (std::vector<double>{2, 2}));
}
