#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "abstain/autodiff.hpp"
#include "abstain/gradcheck.hpp"
#include "abstain/gradsuite.hpp"

using namespace abstain;

namespace {

Tensor iota(Shape s, double start = 1.0) {
  Tensor t(std::move(s));
  std::iota(t.data().begin(), t.data().end(), start);
  return t;
}

}  // namespace

TEST(Conv2d, ZeroInputZeroBiasGivesZero) {
  ad::Tape t;
  auto x = t.constant(Tensor(Shape{1, 1, 3, 3}));
  auto w = t.constant(iota(Shape{2, 1, 3, 3}));
  auto b = t.constant(Tensor(Shape{2}));
  for (double v : ad::conv2d(x, w, b).value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, CenterKernelIsIdentity) {
  ad::Tape t;
  auto xv = iota(Shape{1, 1, 4, 5});
  Tensor k(Shape{1, 1, 3, 3});
  k[4] = 1.0;
  auto y = ad::conv2d(t.constant(xv), t.constant(k), t.constant(Tensor(Shape{1})));
  EXPECT_EQ(y.value(), xv);
}

TEST(Conv2d, KnownBorderValue) {
  // All-ones 3x3 kernel on an all-ones image counts in-bounds taps.
  ad::Tape t;
  auto y = ad::conv2d(t.constant(Tensor(Shape{1, 1, 3, 3}, 1.0)), t.constant(Tensor(Shape{1, 1, 3, 3}, 1.0)),
                      t.constant(Tensor(Shape{1}, 0.5)));
  EXPECT_DOUBLE_EQ(y.value().at(0, 0, 0, 0), 4.5);
  EXPECT_DOUBLE_EQ(y.value().at(0, 0, 0, 1), 6.5);
  EXPECT_DOUBLE_EQ(y.value().at(0, 0, 1, 1), 9.5);
}

TEST(Conv2d, ShapeErrorNamesAxis) {
  ad::Tape t;
  auto x = t.constant(Tensor(Shape{1, 2, 4, 4}));
  auto w = t.constant(Tensor(Shape{3, 1, 3, 3}));
  auto b = t.constant(Tensor(Shape{3}));
  try {
    ad::conv2d(x, w, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "in_channels");
  }
  EXPECT_THROW(ad::conv2d(x, t.constant(Tensor(Shape{3, 2, 3, 3})), t.constant(Tensor(Shape{4}))), DimensionError);
  EXPECT_THROW(ad::conv2d(x, t.constant(Tensor(Shape{3, 2, 5, 5})), b), DimensionError);
}

TEST(Softmax, EqualLogitsAreUniform) {
  ad::Tape t;
  auto p = ad::softmax_channel(t.constant(Tensor(Shape{1, 3, 2, 2}, 0.7)));
  for (double v : p.value().data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LogTwo) {
  ad::Tape t;
  auto p = ad::softmax_channel(t.constant(Tensor(Shape{1, 2, 1, 1}, std::vector<double>{0.0, std::log(2.0)})));
  EXPECT_NEAR(p.value()[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(p.value()[1], 2.0 / 3.0, 1e-15);
}

TEST(Softmax, SumsToOneAndStaysOpen) {
  Rng rng(3);
  ad::Tape t;
  auto p = ad::softmax_channel(t.constant(detail::random_tensor(rng, Shape{2, 4, 5, 5}, -30.0, 30.0)));
  const auto& v = p.value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t y = 0; y < 5; ++y)
      for (std::size_t x = 0; x < 5; ++x) {
        double s = 0.0;
        for (std::size_t c = 0; c < 4; ++c) {
          EXPECT_GT(v.at(b, c, y, x), 0.0);
          EXPECT_LT(v.at(b, c, y, x), 1.0);
          s += v.at(b, c, y, x);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
}

TEST(Softmax, RejectsSingleChannel) {
  ad::Tape t;
  EXPECT_THROW(ad::softmax_channel(t.constant(Tensor(Shape{1, 1, 2, 2}))), DimensionError);
}

TEST(Elementwise, Definitions) {
  ad::Tape t;
  EXPECT_EQ(ad::sigmoid(t.constant(Tensor::scalar(0.0))).item(), 0.5);
  EXPECT_EQ(ad::relu(t.constant(Tensor::scalar(-3.0))).item(), 0.0);
  EXPECT_EQ(ad::relu(t.constant(Tensor::scalar(3.0))).item(), 3.0);
  EXPECT_EQ(ad::abs(t.constant(Tensor::scalar(-2.5))).item(), 2.5);
}

TEST(Elementwise, LogDomainErrorCarriesIndex) {
  ad::Tape t;
  auto x = t.constant(Tensor(Shape{4}, std::vector<double>{1.0, 2.0, 0.0, 3.0}));
  try {
    ad::log(x);
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_EQ(e.index(), 2u);
  }
  EXPECT_THROW(ad::log(t.constant(Tensor::scalar(-1.0))), DomainError);
}

TEST(Elementwise, AbsSubgradientAtZeroIsZero) {
  ad::Tape t;
  auto x = t.leaf(Tensor(Shape{3}, std::vector<double>{-1.0, 0.0, 2.0}));
  t.backward(ad::reduce_sum(ad::abs(x)));
  EXPECT_EQ(x.grad()[0], -1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 1.0);
}

TEST(GatherClass, SelectsLabelledProbability) {
  ad::Tape t;
  auto p = t.constant(iota(Shape{1, 3, 1, 2}));
  LabelMask l(1, 1, 2, std::vector<std::uint8_t>{2, 0});
  auto g = ad::gather_class(p, l);
  EXPECT_EQ(g.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(g.value()[0], 5.0);
  EXPECT_EQ(g.value()[1], 2.0);
}

TEST(AdaptivePool, BlockMeans) {
  ad::Tape t;
  auto y = ad::adaptive_avg_pool(t.constant(iota(Shape{1, 1, 4, 4})), 2);
  EXPECT_EQ(y.value(), Tensor(Shape{1, 1, 2, 2}, std::vector<double>{3.5, 5.5, 11.5, 13.5}));
}

TEST(AdaptivePool, ConstantAndIdentity) {
  ad::Tape t;
  auto c = ad::adaptive_avg_pool(t.constant(Tensor(Shape{1, 2, 5, 5}, 7.0)), 3);
  for (double v : c.value().data()) EXPECT_EQ(v, 7.0);
  auto x = iota(Shape{2, 2, 3, 3});
  EXPECT_EQ(ad::adaptive_avg_pool(t.constant(x), 3).value(), x);
}

TEST(AdaptivePool, UnevenPartition) {
  // Rows/cols split at floor(i*5/2): {0,1} and {2,3,4}.
  ad::Tape t;
  auto y = ad::adaptive_avg_pool(t.constant(iota(Shape{1, 1, 5, 5}, 0.0)), 2);
  EXPECT_DOUBLE_EQ(y.value()[0], (0 + 1 + 5 + 6) / 4.0);
  EXPECT_DOUBLE_EQ(y.value()[3], (12 + 13 + 14 + 17 + 18 + 19 + 22 + 23 + 24) / 9.0);
}

TEST(AdaptivePool, RejectsOutOfRange) {
  ad::Tape t;
  auto x = t.constant(Tensor(Shape{1, 1, 4, 4}));
  EXPECT_THROW(ad::adaptive_avg_pool(x, 0), ConfigError);
  EXPECT_THROW(ad::adaptive_avg_pool(x, 5), ConfigError);
}

TEST(Linear, ZeroAndIdentity) {
  ad::Tape t;
  auto x = iota(Shape{2, 3});
  auto zero = ad::linear(t.constant(x), t.constant(Tensor(Shape{3, 3})), t.constant(Tensor(Shape{3})));
  for (double v : zero.value().data()) EXPECT_EQ(v, 0.0);
  Tensor eye(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  EXPECT_EQ(ad::linear(t.constant(x), t.constant(eye), t.constant(Tensor(Shape{3}))).value(), x);
  EXPECT_THROW(ad::linear(t.constant(x), t.constant(Tensor(Shape{3, 4})), t.constant(Tensor(Shape{3}))), DimensionError);
}

TEST(Tape, BackwardVisitsEachNodeOnce) {
  ad::Tape t;
  auto x = t.leaf(Tensor(Shape{2}, std::vector<double>{1.0, 2.0}));
  auto y = ad::mul(x, x);   // x used twice
  auto z = ad::add(y, y);   // y used twice
  auto s = ad::reduce_sum(ad::add(z, x));
  t.backward(s);
  const auto& visits = t.visit_counts();
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(visits[i], 1u) << t.op(i);
  EXPECT_EQ(x.grad()[0], 4.0 * 1.0 + 1.0);
  EXPECT_EQ(x.grad()[1], 4.0 * 2.0 + 1.0);
}

TEST(Tape, ConstantsAreSkipped) {
  ad::Tape t;
  auto c = t.constant(Tensor::scalar(2.0));
  auto x = t.leaf(Tensor::scalar(3.0));
  t.backward(ad::mul(ad::reshape(c, Shape{}), x));
  EXPECT_EQ(t.visit_counts()[c.id()], 0u);
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Tape, NonScalarRootRejected) {
  ad::Tape t;
  auto x = t.leaf(Tensor(Shape{2}));
  EXPECT_THROW(t.backward(x), DimensionError);
}

TEST(Tape, OperandsOnDifferentTapes) {
  ad::Tape a, b;
  EXPECT_THROW(ad::add(a.leaf(Tensor::scalar(1.0)), b.leaf(Tensor::scalar(1.0))), Error);
}

TEST(GradCheck, SumOfSquares) {
  auto r = ad::grad_check([](ad::Var v) { return ad::reduce_sum(ad::mul(v, v)); },
                          Tensor(Shape{2}, std::vector<double>{1.0, 2.0}));
  EXPECT_LT(r.max_rel_error, 1e-9);
  EXPECT_DOUBLE_EQ(r.analytic[0], 2.0);
  EXPECT_DOUBLE_EQ(r.analytic[1], 4.0);
}

TEST(GradCheck, ReluAwayFromKink) {
  auto r = ad::grad_check([](ad::Var v) { return ad::reduce_sum(ad::relu(v)); },
                          Tensor(Shape{4}, std::vector<double>{0.2, 0.5, 1.0, 3.0}));
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, Conv2dOnSpecShape) {
  Rng rng(11);
  const auto w = detail::random_tensor(rng, Shape{3, 2, 3, 3});
  const auto bias = detail::random_tensor(rng, Shape{3});
  const auto probe = detail::random_tensor(rng, Shape{1, 3, 4, 4});
  auto r = ad::grad_check(
      [&](ad::Var x) {
        auto& t = x.tape();
        return detail::probe_sum(ad::conv2d(x, t.constant(w), t.constant(bias)), probe);
      },
      detail::random_tensor(rng, Shape{1, 2, 4, 4}));
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GradCheck, FullSuiteOneSeed) {
  for (const auto& r : run_gradient_suite(0, 1)) EXPECT_LT(r.max_rel_error, 1e-4) << r.name;
}
