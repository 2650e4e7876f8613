#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "cmfuse/ops.hpp"
#include "cmfuse/rng.hpp"
#include "cmfuse/tensor.hpp"
#include "support/finite_diff.hpp"

using namespace cmfuse;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
  Tensor t = Tensor::randn(std::move(shape), rng);
  t.set_requires_grad(requires_grad);
  return t;
}

// Weighted sum with fixed random weights, so every output element carries an
// O(1) gradient contribution.
Tensor weighted_sum(const Tensor& t, const std::vector<double>& w) {
  Tensor wt = Tensor::from(t.shape(), w);
  return sum(mul(t, wt));
}

std::vector<double> rand_weights(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  for (double& v : w) v = rng.next_normal();
  return w;
}

}  // namespace

// ---------------------------------------------------------------- matmul

TEST(Matmul, IdentityCase) {
  Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
  Tensor out = matmul(id, b);
  EXPECT_EQ(out.values(), b.values());
}

TEST(Matmul, HandEvaluated) {
  Tensor a = Tensor::from({1, 2}, {1, 2});
  Tensor b = Tensor::from({2, 1}, {3, 4});
  Tensor out = matmul(a, b);
  ASSERT_EQ(out.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(out.data()[0], 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected shape error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradOfSumMatchesHandValue) {
  Tensor a = Tensor::from({1, 2}, {1, 2}).set_requires_grad();
  Tensor b = Tensor::from({2, 1}, {3, 4});
  Tensor loss;
  {
    Tape tape;
    loss = sum(matmul(a, b));
    tape.backward(loss);
  }
  ASSERT_TRUE(a.has_grad());
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(a.grad()[1], 4.0);

  std::vector<Tensor> inputs{a};
  auto check = testsupport::check_gradients(inputs, [&] { return sum(matmul(a, b)).value(); });
  EXPECT_LT(check.max_rel_err, 1e-4);
}

// ---------------------------------------------------------------- softmax

TEST(Softmax, SymmetryAndStability) {
  Tensor x = Tensor::from({2}, {0, 0});
  Tensor y = softmax(x, 0);
  EXPECT_DOUBLE_EQ(y.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.data()[1], 0.5);

  Tensor big = Tensor::from({2}, {1000, 1000});
  Tensor yb = softmax(big, 0);
  EXPECT_DOUBLE_EQ(yb.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(yb.data()[1], 0.5);
}

TEST(Softmax, ClosedForm) {
  Tensor x = Tensor::from({2}, {std::log(1.0), std::log(3.0)});
  Tensor y = softmax(x, 0);
  EXPECT_NEAR(y.data()[0], 0.25, 1e-15);
  EXPECT_NEAR(y.data()[1], 0.75, 1e-15);
}

TEST(Softmax, AxisOutOfRange) {
  Tensor x = Tensor::zeros({2, 2});
  EXPECT_THROW(softmax(x, 2), std::invalid_argument);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + rng.next_below(4);
    const std::size_t cols = 1 + rng.next_below(6);
    Tensor x = Tensor::randn({rows, cols}, rng, 3.0);
    Tensor y = softmax(x, 1);
    for (std::size_t i = 0; i < rows; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        EXPECT_GT(y.at(i, j), 0.0);
        total += y.at(i, j);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
    const double shift = rng.next_normal(0.0, 50.0);
    Tensor y2 = softmax(affine(x, 1.0, shift), 1);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      EXPECT_NEAR(y2.data()[i], y.data()[i], 1e-10);
    }
  }
}

// ---------------------------------------------------------------- masked softmax

TEST(MaskedSoftmax, MaskedPositionsGetExactZero) {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  std::vector<bool> valid{true, false, true};
  Tensor y = masked_softmax_rows(x, valid);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(y.at(i, 1), 0.0);
    EXPECT_NEAR(y.at(i, 0) + y.at(i, 2), 1.0, 1e-12);
  }
}

TEST(MaskedSoftmax, AllMaskedIsError) {
  Tensor x = Tensor::zeros({1, 2});
  EXPECT_THROW(masked_softmax_rows(x, {false, false}), std::invalid_argument);
}

// ---------------------------------------------------------------- layer norm

TEST(LayerNorm, ConstantRowMapsToZero) {
  Tensor x = Tensor::from({1, 3}, {5, 5, 5});
  Tensor gain = Tensor::full({3}, 1.0);
  Tensor bias = Tensor::zeros({3});
  Tensor y = layer_norm(x, gain, bias, 1e-5);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(y.data()[j], 0.0, 1e-10);
}

TEST(LayerNorm, PopulationVarianceConvention) {
  // Row [1,3]: mean 2, population variance 1, so normalized row is [-1, 1].
  Tensor x = Tensor::from({1, 2}, {1, 3});
  Tensor gain = Tensor::full({2}, 1.0);
  Tensor bias = Tensor::zeros({2});
  Tensor y = layer_norm(x, gain, bias, 1e-12);
  EXPECT_NEAR(y.data()[0], -1.0, 1e-6);
  EXPECT_NEAR(y.data()[1], 1.0, 1e-6);
}

TEST(LayerNorm, RowStatsWithinTolerance) {
  Rng rng(3);
  Tensor x = Tensor::randn({4, 8}, rng, 2.0);
  Tensor gain = Tensor::full({8}, 1.0);
  Tensor bias = Tensor::zeros({8});
  Tensor y = layer_norm(x, gain, bias, 1e-12);
  for (std::size_t i = 0; i < 4; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mean += y.at(i, j);
    mean /= 8.0;
    for (std::size_t j = 0; j < 8; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
    var /= 8.0;
    EXPECT_NEAR(mean, 0.0, 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-10);
  }
}

TEST(LayerNorm, EpsMustBePositive) {
  Tensor x = Tensor::zeros({1, 2});
  Tensor g = Tensor::full({2}, 1.0);
  Tensor b = Tensor::zeros({2});
  EXPECT_THROW(layer_norm(x, g, b, 0.0), std::invalid_argument);
}

// ---------------------------------------------------------------- gelu

TEST(Gelu, FixedPoints) {
  Tensor x = Tensor::from({3}, {0.0, 20.0, -20.0});
  Tensor y = gelu(x);
  EXPECT_DOUBLE_EQ(y.data()[0], 0.0);
  EXPECT_NEAR(y.data()[1], 20.0, 1e-12);
  EXPECT_NEAR(y.data()[2], 0.0, 1e-12);
}

// ---------------------------------------------------------------- cross entropy

TEST(CrossEntropy, ClosedForm) {
  Tensor logits = Tensor::from({1, 2}, {0, 0});
  Tensor loss = cross_entropy(logits, {0});
  EXPECT_NEAR(loss.value(), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, ConfidentCorrectIsNearZero) {
  Tensor logits = Tensor::from({1, 2}, {30, -30});
  Tensor loss = cross_entropy(logits, {0});
  EXPECT_NEAR(loss.value(), 0.0, 1e-12);
}

TEST(CrossEntropy, LabelOutOfRangeNamesRow) {
  Tensor logits = Tensor::zeros({3, 4});
  try {
    cross_entropy(logits, {0, 7, 1});
    FAIL() << "expected out_of_range";
  } catch (const std::out_of_range& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos) << e.what();
  }
}

TEST(CrossEntropy, GradIsSoftmaxMinusOneHot) {
  Rng rng(7);
  Tensor logits = rand_tensor({3, 5}, rng);
  std::vector<std::size_t> labels{4, 0, 2};
  Tensor loss;
  {
    Tape tape;
    loss = cross_entropy(logits, labels);
    tape.backward(loss);
  }
  Tensor probs = softmax(logits, 1);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      const double expect = (probs.at(i, j) - (labels[i] == j ? 1.0 : 0.0)) / 3.0;
      EXPECT_NEAR(logits.grad()[i * 5 + j], expect, 1e-12);
    }
  }
  std::vector<Tensor> inputs{logits};
  auto check = testsupport::check_gradients(inputs, [&] { return cross_entropy(logits, labels).value(); });
  EXPECT_LT(check.max_rel_err, 1e-4);
}

// ---------------------------------------------------------------- backward mechanics

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::zeros({2, 3}).set_requires_grad();
  {
    Tape tape;
    tape.backward(sum(x));
  }
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, ReuseAccumulates) {
  Tensor x = Tensor::zeros({4}).set_requires_grad();
  {
    Tape tape;
    Tensor loss = add(sum(x), sum(x));
    tape.backward(loss);
  }
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 2.0);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x = Tensor::zeros({2}).set_requires_grad();
  Tape tape;
  EXPECT_THROW(tape.backward(x), std::invalid_argument);
}

TEST(Backward, SecondBackwardRejected) {
  Tensor x = Tensor::zeros({2}).set_requires_grad();
  Tape tape;
  Tensor loss = sum(x);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), std::runtime_error);
}

TEST(Backward, NoTapeMeansPureForward) {
  Tensor x = Tensor::full({2}, 1.0).set_requires_grad();
  Tensor y = sum(x);  // no tape active
  EXPECT_DOUBLE_EQ(y.value(), 2.0);
  EXPECT_FALSE(x.has_grad());
}

// ---------------------------------------------------------------- finite-difference property suite

// Every differentiable op, checked against central differences on random
// small shapes. This is the module-level gradient property; the acceptance
// suite re-runs it together with the full-model check.
TEST(GradientProperty, AllOpsMatchFiniteDifferences) {
  Rng rng(2024);
  double worst = 0.0;
  std::size_t trials = 0;

  auto run_check = [&](std::vector<Tensor>& inputs, const std::function<Tensor()>& fwd) {
    std::vector<double> w = rand_weights(fwd().numel(), rng);
    auto eval = [&] { return weighted_sum(fwd(), w).value(); };
    {
      Tape tape;
      Tensor loss = weighted_sum(fwd(), w);
      tape.backward(loss);
    }
    auto check = testsupport::check_gradients(inputs, eval);
    worst = std::max(worst, check.max_rel_err);
    for (Tensor& t : inputs) t.zero_grad();
    trials += 1;
  };

  for (int rep = 0; rep < 12; ++rep) {
    const std::size_t m = 1 + rng.next_below(3);
    const std::size_t k = 1 + rng.next_below(3);
    const std::size_t n = 1 + rng.next_below(3);

    {
      std::vector<Tensor> in{rand_tensor({m, k}, rng), rand_tensor({k, n}, rng)};
      run_check(in, [&] { return matmul(in[0], in[1]); });
    }
    {
      std::vector<Tensor> in{rand_tensor({m, n}, rng)};
      run_check(in, [&] { return transpose(in[0]); });
    }
    {
      std::vector<Tensor> in{rand_tensor({m, n}, rng), rand_tensor({m, n}, rng)};
      run_check(in, [&] { return add(in[0], in[1]); });
      run_check(in, [&] { return sub(in[0], in[1]); });
      run_check(in, [&] { return mul(in[0], in[1]); });
    }
    {
      std::vector<Tensor> in{rand_tensor({m, n}, rng)};
      run_check(in, [&] { return affine(in[0], -1.7, 0.3); });
      run_check(in, [&] { return gelu(in[0]); });
      run_check(in, [&] { return sigmoid(in[0]); });
      run_check(in, [&] { return softmax(in[0], 1); });
      run_check(in, [&] { return softmax(in[0], 0); });
      run_check(in, [&] { return reshape(in[0], {n, m}); });
    }
    {
      std::vector<Tensor> in{rand_tensor({m, n}, rng), rand_tensor({1}, rng)};
      run_check(in, [&] { return scale_by(in[0], in[1]); });
    }
    {
      std::vector<Tensor> in{rand_tensor({m, n}, rng), rand_tensor({n}, rng)};
      run_check(in, [&] { return add_row(in[0], in[1]); });
    }
    {
      std::vector<Tensor> in{rand_tensor({n}, rng), rand_tensor({n}, rng)};
      run_check(in, [&] { return dot(in[0], in[1]); });
    }
    {
      std::vector<Tensor> in{rand_tensor({2, n}, rng), rand_tensor({3, n}, rng)};
      run_check(in, [&] { return concat_rows(in[0], in[1]); });
      run_check(in, [&] { return slice_rows(in[1], 1, 2); });
      run_check(in, [&] { return select_row(in[1], 0); });
    }
    {
      std::vector<Tensor> in{rand_tensor({m, 2}, rng), rand_tensor({m, 3}, rng)};
      run_check(in, [&] { return concat_cols({in[0], in[1]}); });
      run_check(in, [&] { return slice_cols(in[1], 1, 2); });
    }
    {
      std::vector<Tensor> in{rand_tensor({m, 1 + n}, rng)};
      std::vector<bool> valid(1 + n, true);
      valid[rng.next_below(1 + n)] = false;
      bool all_false = true;
      for (bool v : valid) all_false = all_false && !v;
      if (!all_false) {
        run_check(in, [&] { return masked_softmax_rows(in[0], valid); });
      }
    }
    {
      std::vector<Tensor> in{rand_tensor({m, 1 + n}, rng), rand_tensor({1 + n}, rng),
                             rand_tensor({1 + n}, rng)};
      run_check(in, [&] { return layer_norm(in[0], in[1], in[2], 1e-3); });
    }
    {
      Tensor x = rand_tensor({m, 2 + n}, rng);
      // keep rows away from zero so the normalization stays well-conditioned
      for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] += (x.data()[i] >= 0 ? 1.0 : -1.0);
      std::vector<Tensor> in{x};
      run_check(in, [&] { return l2_normalize_rows(in[0]); });
    }
    {
      std::vector<Tensor> in{rand_tensor({4, n}, rng)};
      std::vector<std::size_t> ids{0, 2, 2, 1 + rng.next_below(3)};
      run_check(in, [&] { return embedding_rows(in[0], ids); });
    }
    {
      std::vector<Tensor> in{rand_tensor({m, 2 + n}, rng)};
      std::vector<std::size_t> labels(m);
      for (std::size_t i = 0; i < m; ++i) labels[i] = rng.next_below(2 + n);
      run_check(in, [&] { return cross_entropy(in[0], labels); });
    }
  }

  EXPECT_GE(trials, 100u);
  EXPECT_LT(worst, 1e-4) << "worst finite-difference mismatch across " << trials << " trials";
}

// ---------------------------------------------------------------- invariants

TEST(Tensor, ShapeDataInvariant) {
  Tensor t = Tensor::zeros({3, 4, 2});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), std::invalid_argument);
}

TEST(Tensor, CloneIsDeep) {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = a.clone();
  b.data()[0] = 99;
  EXPECT_DOUBLE_EQ(a.data()[0], 1.0);
}

TEST(Tensor, FiniteAfterForwardOps) {
  Rng rng(5);
  Tensor x = Tensor::randn({4, 6}, rng, 100.0);
  Tensor g = Tensor::full({6}, 1.0);
  Tensor b = Tensor::zeros({6});
  for (const Tensor& y : {softmax(x, 1), layer_norm(x, g, b, 1e-5), gelu(x), sigmoid(x)}) {
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_TRUE(std::isfinite(y.data()[i]));
  }
}
