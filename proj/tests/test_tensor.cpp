#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "laffi/optim.hpp"
#include "laffi/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/random_graphs.hpp"

using namespace laffi;
using laffi::testing::random_tensor;

namespace {

// Independent triple-loop oracle.
std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  std::vector<double> c(a.rows() * b.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += double(a.at(i, k)) * double(b.at(k, j));
      c[i * b.cols() + j] = s;
    }
  return c;
}

}  // namespace

TEST(Matmul, HandExample) {
  auto a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  auto b = Tensor::matrix(2, 2, {5, 6, 7, 8});
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(std::vector<float>(c.data().begin(), c.data().end()), (std::vector<float>{19, 22, 43, 50}));
}

TEST(Matmul, IdentityAndAnnihilator) {
  std::mt19937_64 rng(3);
  auto a = random_tensor<float>({3, 3}, rng, 1.0, false);
  auto eye = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto z = Tensor::zeros({3, 3});
  auto ia = matmul(eye, a);
  auto za = matmul(z, a);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_EQ(ia[i], a[i]);
    EXPECT_EQ(za[i], 0.0f);
  }
}

TEST(Matmul, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng() % 16, k = 1 + rng() % 16, n = 1 + rng() % 16;
    auto a = random_tensor<float>({m, k}, rng, 1.0, false);
    auto b = random_tensor<float>({k, n}, rng, 1.0, false);
    auto c = matmul(a, b);
    ASSERT_EQ(c.shape(), (Shape{m, n}));
    const auto ref = naive_matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-5);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3] x [2,3]"), std::string::npos) << e.what();
  }
}

TEST(Softmax, UniformAndClosedForm) {
  auto y = softmax_rows(Tensor::matrix(2, 3, {0, 0, 0, 0, std::log(2.0f), -1e30f}));
  EXPECT_NEAR(y[0], 1.0 / 3, 1e-7);
  EXPECT_NEAR(y[1], 1.0 / 3, 1e-7);
  EXPECT_NEAR(y[3], 1.0 / 3, 1e-6);
  EXPECT_NEAR(y[4], 2.0 / 3, 1e-6);
  EXPECT_EQ(y[5], 0.0f);
}

TEST(Softmax, ShiftInvarianceAndStability) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 1 + rng() % 12;
    const double mag = (trial % 2) ? 1e4 : 3.0;
    auto x = random_tensor<float>({4, c}, rng, mag, false);
    auto y = softmax_rows(x);
    auto shifted = softmax_rows(add(x, Tensor::full({4, c}, 7.5f)));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < c; ++j) {
        EXPECT_GE(y.at(r, j), 0.0f);
        s += y.at(r, j);
        if (mag < 10) EXPECT_NEAR(y.at(r, j), shifted.at(r, j), 1e-6);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, NaNInputRaises) {
  auto node = std::make_shared<TensorNode<float>>();
  node->shape = {1, 2};
  node->data = {0.0f, std::numeric_limits<float>::quiet_NaN()};
  EXPECT_THROW(softmax_rows(Tensor::from_node(node)), NumericError);
  EXPECT_THROW(Tensor::matrix(1, 1, {std::numeric_limits<float>::infinity()}), NumericError);
}

TEST(CausalSoftmax, MaskedEntriesExactlyZero) {
  std::mt19937_64 rng(9);
  auto x = random_tensor<float>({5, 5}, rng, 4.0, false);
  auto y = causal_softmax_rows(x);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      if (j > i) EXPECT_EQ(y.at(i, j), 0.0f);
      s += y.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(CausalAttention, MatchesComposedOps) {
  std::mt19937_64 rng(21);
  const std::size_t t = 7, heads = 3, dh = 4, d = heads * dh;
  auto q = random_tensor<double>({t, d}, rng), k = random_tensor<double>({t, d}, rng);
  auto v = random_tensor<double>({t, d}, rng);
  auto r = random_tensor<double>({t, d}, rng, 1.0, false);
  std::vector<double> probs;
  auto fused = causal_attention(q, k, v, heads, 0.5, &probs);
  backward(sum(mul(fused, r)));
  const std::vector<double> gq(q.grad().begin(), q.grad().end()), gk(k.grad().begin(), k.grad().end()),
      gv(v.grad().begin(), v.grad().end());
  q.zero_grad(), k.zero_grad(), v.zero_grad();

  std::vector<Tensor64> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    auto p = causal_softmax_rows(
        scale(matmul_nt(slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh)), 0.5));
    for (std::size_t i = 0; i < t * t; ++i) EXPECT_NEAR(probs[h * t * t + i], p[i], 1e-14);
    outs.push_back(matmul(p, slice_cols(v, h * dh, dh)));
  }
  auto composed = concat_cols(outs);
  for (std::size_t i = 0; i < t * d; ++i) EXPECT_NEAR(fused[i], composed[i], 1e-13);
  backward(sum(mul(composed, r)));
  for (std::size_t i = 0; i < t * d; ++i) {
    EXPECT_NEAR(gq[i], q.grad()[i], 1e-12);
    EXPECT_NEAR(gk[i], k.grad()[i], 1e-12);
    EXPECT_NEAR(gv[i], v.grad()[i], 1e-12);
  }
  EXPECT_THROW(causal_attention(q, k, v, 5, 0.5), DimensionError);
}

TEST(LayerNorm, ConstantRowYieldsBeta) {
  auto x = Tensor::matrix(1, 3, {2, 2, 2});
  auto gamma = Tensor({3}, {5, -1, 3});
  auto beta = Tensor({3}, {0.5f, 1.5f, -2});
  auto y = layer_norm(x, gamma, beta, 1e-5f);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y[j], beta[j]);
}

TEST(LayerNorm, HandNormalization) {
  auto y = layer_norm(Tensor64::matrix(1, 2, {1, 3}), Tensor64({2}, {1, 1}), Tensor64({2}, {0, 0}), 1e-12);
  EXPECT_NEAR(y[0], -1.0, 1e-9);
  EXPECT_NEAR(y[1], 1.0, 1e-9);
}

TEST(LayerNorm, ZeroMeanWithZeroBeta) {
  std::mt19937_64 rng(2);
  auto x = random_tensor<float>({6, 8}, rng, 5.0, false);
  auto gamma = Tensor::full({8}, 1.0f);
  auto y = layer_norm(x, gamma, Tensor::zeros({8}), 1e-5f);
  for (std::size_t i = 0; i < 6; ++i) {
    double m = 0;
    for (std::size_t j = 0; j < 8; ++j) m += y.at(i, j);
    EXPECT_LT(std::abs(m / 8), 1e-6);
  }
}

TEST(CrossEntropy, UniformLogits) {
  std::vector<TokenId> t{17};
  std::vector<std::uint8_t> mask{1};
  auto loss = cross_entropy(Tensor::zeros({1, 256}), t, mask);
  EXPECT_NEAR(loss.item(), std::log(256.0), 1e-5);
}

TEST(CrossEntropy, AllMaskedIsZero) {
  std::vector<TokenId> t{0, 1};
  std::vector<std::uint8_t> mask{0, 0};
  auto logits = Tensor::matrix(2, 2, {1, 2, 3, 4}, true);
  auto loss = cross_entropy(logits, t, mask);
  EXPECT_EQ(loss.item(), 0.0f);
  backward(loss);
  for (float g : logits.grad()) EXPECT_EQ(g, 0.0f);
}

TEST(CrossEntropy, ConfidentLogits) {
  std::vector<TokenId> t{0};
  std::vector<std::uint8_t> mask{1};
  auto loss = cross_entropy(Tensor64::matrix(1, 3, {10, 0, 0}), t, mask);
  EXPECT_NEAR(loss.item(), std::log1p(2 * std::exp(-10.0)), 1e-12);
  EXPECT_NEAR(loss.item(), 9.08e-5, 1e-7);
}

TEST(CrossEntropy, TargetOutOfRange) {
  std::vector<TokenId> t{3};
  std::vector<std::uint8_t> mask{1};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), t, mask), IndexError);
}

TEST(Backward, SumOfSquares) {
  auto x = Tensor({4}, {1, -2, 3, 0.5f}, true);
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(x.grad()[i], 2 * x[i]);
}

TEST(Backward, AccumulatesAcrossUses) {
  auto x = Tensor({2}, {1, 2}, true);
  backward(add(sum(x), sum(scale(x, 3.0f))));
  EXPECT_FLOAT_EQ(x.grad()[0], 4.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 4.0f);
}

TEST(Backward, FrozenTensorGetsNoGradBuffer) {
  auto w = Tensor::matrix(2, 2, {1, 2, 3, 4}, false);
  auto x = Tensor::matrix(2, 2, {1, 0, 0, 1}, true);
  backward(sum(matmul(x, w)));
  EXPECT_FALSE(w.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Backward, NonScalarIsUsageError) {
  auto x = Tensor({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2.0f)), UsageError);
}

TEST(GradCheck, RandomGraphsFloatAndDouble) {
  for (std::size_t i = 0; i < 25; ++i) {
    auto g32 = laffi::testing::make_random_graph<float>(i, 1);
    EXPECT_LT(laffi::testing::gradcheck<float>(g32.params, g32.loss, 3e-2).relative_error, 1e-3)
        << g32.kind << " #" << i;
    auto g64 = laffi::testing::make_random_graph<double>(i, 1);
    const auto r64 = laffi::testing::gradcheck<double>(g64.params, g64.loss, 1e-3);
    EXPECT_LT(r64.relative_error, 1e-6) << g64.kind << " #" << i;
    EXPECT_LT(r64.worst_tensor_error, 1e-6) << g64.kind << " #" << i;
  }
}

TEST(Determinism, RepeatedGraphIsBitIdentical) {
  auto g1 = laffi::testing::make_random_graph<float>(1, 42);
  auto g2 = laffi::testing::make_random_graph<float>(1, 42);
  EXPECT_EQ(g1.loss().item(), g2.loss().item());
}

TEST(AdamW, ZeroGradientNoDecayLeavesParams) {
  auto p = Tensor({3}, {1, -2, 3}, true);
  AdamW opt({p}, {.lr = 0.1, .weight_decay = 0.0});
  backward(sum(scale(p, 0.0f)));
  opt.step();
  EXPECT_EQ(p[0], 1.0f);
  EXPECT_EQ(p[1], -2.0f);
  EXPECT_EQ(p[2], 3.0f);
}

TEST(AdamW, FirstStepMovesBySignedLearningRate) {
  auto p = Tensor({3}, {0.5f, 0.5f, 0.5f}, true);
  auto coeff = Tensor({3}, {3.0f, -0.25f, 40.0f});
  AdamW opt({p}, {.lr = 0.01, .weight_decay = 0.0});
  backward(sum(mul(p, coeff)));
  opt.step();
  EXPECT_NEAR(p[0], 0.5 - 0.01, 1e-7);
  EXPECT_NEAR(p[1], 0.5 + 0.01, 1e-7);
  EXPECT_NEAR(p[2], 0.5 - 0.01, 1e-7);
}

TEST(AdamW, DecoupledWeightDecayOnly) {
  auto p = Tensor({2}, {2.0f, -4.0f}, true);
  AdamW opt({p}, {.lr = 0.1, .weight_decay = 0.01});
  backward(sum(scale(p, 0.0f)));
  opt.step();
  EXPECT_FLOAT_EQ(p[0], 2.0f * 0.999f);
  EXPECT_FLOAT_EQ(p[1], -4.0f * 0.999f);
}

TEST(AdamW, MissingGradientIsUsageError) {
  auto p = Tensor({2}, {1, 2}, true);
  AdamW opt({p}, {});
  EXPECT_THROW(opt.step(), UsageError);
  EXPECT_THROW(AdamW({p}, {.lr = -1.0}), ConfigError);
}
