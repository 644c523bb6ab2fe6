#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "abstain/gradsuite.hpp"
#include "abstain/losses.hpp"

using namespace abstain;

namespace {

// [1, k, 1, n] probabilities from per-pixel channel vectors.
Tensor pixels(const std::vector<std::vector<double>>& px) {
  const std::size_t n = px.size(), k = px.front().size();
  Tensor t(Shape{1, k, 1, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) t.at(0, c, 0, i) = px[i][c];
  return t;
}

LabelMask row(std::vector<std::uint8_t> l) {
  const auto n = l.size();
  return LabelMask(1, 1, n, std::move(l));
}

// Random [b, k, h, w] probability field with the last channel inside [lo, hi].
Tensor random_field(Rng& rng, std::size_t b, std::size_t k, std::size_t h, std::size_t w, double lo = 0.01,
                    double hi = 0.9) {
  Tensor t(Shape{b, k, h, w});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double last = rng.uniform(lo, hi);
        double s = 0.0;
        std::vector<double> v(k - 1);
        for (auto& e : v) s += (e = rng.uniform(0.05, 1.0));
        for (std::size_t c = 0; c + 1 < k; ++c) t.at(n, c, y, x) = (1.0 - last) * v[c] / s;
        t.at(n, k - 1, y, x) = last;
      }
  return t;
}

constexpr double kLn2 = 0.69314718055994530942;

}  // namespace

TEST(CrossEntropy, Values) {
  ad::Tape t;
  EXPECT_NEAR(cross_entropy(t.constant(pixels({{0.5, 0.5}})), row({1})).item(), kLn2, 1e-15);
  EXPECT_EQ(cross_entropy(t.constant(pixels({{1.0, 0.0}, {0.0, 1.0}})), row({0, 1})).item(), 0.0);
  // p_target = 0 is floored at 1e-12.
  EXPECT_NEAR(cross_entropy(t.constant(pixels({{0.0, 1.0}})), row({0})).item(), -std::log(1e-12), 1e-9);
}

TEST(Gce, Values) {
  ad::Tape t;
  EXPECT_NEAR(gce(t.constant(pixels({{0.81, 0.19}})), row({0}), 0.5).item(), 0.2, 1e-15);
  EXPECT_EQ(gce(t.constant(pixels({{1.0, 0.0}})), row({0}), 0.5).item(), 0.0);
  auto p = pixels({{0.3, 0.7}, {0.6, 0.4}});
  EXPECT_NEAR(gce(t.constant(p), row({0, 0}), 1.0).item(), (0.7 + 0.4) / 2.0, 1e-15);
  EXPECT_THROW(gce(t.constant(p), row({0, 0}), 0.0), ConfigError);
  EXPECT_THROW(gce(t.constant(p), row({0, 0}), 1.5), ConfigError);
}

TEST(Sce, Values) {
  ad::Tape t;
  EXPECT_NEAR(sce(t.constant(pixels({{0.7, 0.3}})), row({0}), 1.0, 1.0, -4.0).item(), 1.556675, 1e-6);
  EXPECT_EQ(sce(t.constant(pixels({{1.0, 0.0}})), row({0}), 1.0, 1.0, -4.0).item(), 0.0);
}

TEST(Dice, Values) {
  ad::Tape t;
  const double expect = 1.0 - 0.5 * (1.6 / 2.2 + 1.2 / 1.8);
  EXPECT_NEAR(dice(t.constant(pixels({{0.8, 0.2}, {0.4, 0.6}})), row({0, 1}), 1e-6).item(), 0.303030, 1e-6);
  EXPECT_NEAR(dice(t.constant(pixels({{0.8, 0.2}, {0.4, 0.6}})), row({0, 1}), 1e-12).item(), expect, 1e-11);
  EXPECT_LT(dice(t.constant(pixels({{1.0, 0.0}, {0.0, 1.0}})), row({0, 1}), 1e-6).item(), 1e-6);
  EXPECT_NEAR(dice(t.constant(pixels({{0.0, 1.0}, {1.0, 0.0}})), row({0, 1}), 1e-12).item(), 1.0, 1e-11);
}

TEST(Dac, HandValue) {
  ad::Tape t;
  auto out = dac_loss(t.constant(pixels({{0.7, 0.2, 0.1}})), row({0}), 1.0);
  EXPECT_NEAR(out.scalar(), 0.9 * -std::log(0.7 / 0.9) + std::log(1.0 / 0.9), 1e-14);
  EXPECT_NEAR(out.scalar(), 0.331544, 1e-6);
}

TEST(Idac, PenaltyValue) {
  // Two pixels with p_abstain 0.02 and 0.08: eta_hat = 0.05, eta_tilde = 0.15.
  ad::Tape t;
  auto p = t.constant(pixels({{0.98, 0.0, 0.02}, {0.92, 0.0, 0.08}}));
  const auto labels = row({0, 0});
  const double first = dac_loss(p, labels, 0.0).scalar();
  EXPECT_NEAR(idac_loss(p, labels, 1.0, NoisePrior{0.15, {}}).scalar() - first, 0.01, 1e-15);
  EXPECT_NEAR(idac_loss(p, labels, 1.0, NoisePrior{0.05, {}}).scalar() - first, 0.0, 1e-15);
}

TEST(Idac, PenaltyGradient) {
  Rng rng(5);
  const auto field = random_field(rng, 1, 3, 2, 3, 0.05, 0.3);
  const auto labels = detail::random_labels(rng, 1, 2, 3, 2);
  const double alpha = 1.7, eta_tilde = 0.4;
  ad::Tape t;
  auto p = t.leaf(field);
  auto out = idac_loss(p, labels, alpha, NoisePrior{eta_tilde, {}});
  auto first = dac_loss(p, labels, 0.0);
  t.backward(out.value);
  const Tensor g_full = p.grad();
  t.zero_grad();
  t.backward(first.value);
  double eta_hat = 0.0;
  for (std::size_t i = 0; i < 6; ++i) eta_hat += field[2 * 6 + i];
  eta_hat /= 6.0;
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(g_full[2 * 6 + i] - p.grad()[2 * 6 + i], 2.0 * alpha * (eta_hat - eta_tilde) / 6.0, 1e-13);
  }
}

TEST(Wrapper, PenaltyValue) {
  // GCE at p_target = 1 contributes 0, leaving only the penalty.
  ad::Tape t;
  LossConfig cfg;
  auto out = abstention_wrap(LossKind::gce, t.constant(pixels({{0.95, 0.0, 0.05}})), row({0}), 2.0, NoisePrior{0.15, {}}, cfg);
  EXPECT_NEAR(out.scalar(), 0.222452, 1e-6);
  EXPECT_NEAR(out.scalar(), 2.0 * std::fabs(std::log(0.85 / 0.95)), 1e-14);
}

TEST(Wrapper, PenaltyZeroAtPrior) {
  ad::Tape t;
  LossConfig cfg;
  auto out = abstention_wrap(LossKind::sce, t.constant(pixels({{0.85, 0.0, 0.15}})), row({0}), 3.0, NoisePrior{0.15, {}}, cfg);
  EXPECT_NEAR(out.scalar(), 0.0, 1e-15);
}

TEST(Wrapper, RejectsUnsupportedBase) {
  ad::Tape t;
  EXPECT_THROW(abstention_wrap(LossKind::dice, t.constant(pixels({{0.5, 0.3, 0.2}})), row({0}), 1.0, {}, {}), ConfigError);
}

TEST(Ads, HandValue) {
  // Class 0 soft dice 0.6, class 1 soft dice 0.8.
  ad::Tape t;
  const double c = 13.0 / 45.0;
  auto p = t.constant(pixels({{0.8, 0.2}, {c, 1 - c}, {c, 1 - c}, {c, 1 - c}}));
  auto a = t.constant(Tensor(Shape{1, 2}, std::vector<double>{0.5, 0.0}));
  auto out = ads_loss(p, a, row({0, 1, 1, 1}), 1.0, NoisePrior{0.0, {0.0, 0.0}}, 1e-12);
  EXPECT_NEAR(out.scalar(), 0.2 + 0.5 * kLn2, 1e-11);
  EXPECT_NEAR(out.scalar(), 0.546574, 1e-6);
  EXPECT_EQ(out.abstention_rate_soft, 0.25);
  EXPECT_EQ(out.abstention_rate_hard, 0.0);
}

TEST(Ads, PenaltyZeroAtPrior) {
  ad::Tape t;
  auto p = t.constant(pixels({{0.6, 0.4}, {0.3, 0.7}}));
  auto a = t.constant(Tensor(Shape{1, 2}, std::vector<double>{0.1, 0.3}));
  const auto labels = row({0, 1});
  const double d = dice(p, labels, 1e-6).item();
  auto per = detail::dice_per_class(p, labels, 1e-6).value();
  auto out = ads_loss(p, a, labels, 5.0, NoisePrior{0.0, {0.1, 0.3}}, 1e-6);
  EXPECT_NEAR(out.scalar(), 0.5 * (0.9 * per[0] + 0.7 * per[1]), 1e-15);
  EXPECT_LT(out.scalar(), d);
}

TEST(Ads, ShapeChecks) {
  ad::Tape t;
  auto p = t.constant(pixels({{0.6, 0.4}}));
  EXPECT_THROW(ads_loss(p, t.constant(Tensor(Shape{1, 3})), row({0}), 1.0, {}, 1e-6), DimensionError);
  EXPECT_THROW(ads_loss(p, t.constant(Tensor(Shape{2, 2})), row({0}), 1.0, {}, 1e-6), DimensionError);
}

TEST(Reductions, DacWithoutAbstentionIsCrossEntropy) {
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    auto f = random_field(rng, 2, 4, 3, 3);
    Tensor k3(Shape{2, 3, 3, 3});
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 9; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < 3; ++c) s += f[(b * 4 + c) * 9 + i];
        for (std::size_t c = 0; c < 3; ++c) k3[(b * 3 + c) * 9 + i] = f[(b * 4 + c) * 9 + i] / s;
        for (std::size_t c = 0; c < 3; ++c) f[(b * 4 + c) * 9 + i] = k3[(b * 3 + c) * 9 + i];
        f[(b * 4 + 3) * 9 + i] = 0.0;
      }
    const auto labels = detail::random_labels(rng, 2, 3, 3, 3);
    ad::Tape t;
    EXPECT_NEAR(dac_loss(t.constant(f), labels, 2.5).scalar(), cross_entropy(t.constant(k3), labels).item(), 1e-12);
  }
}

TEST(Reductions, WrapperPenaltyWithoutPriorIsDacPenalty) {
  Rng rng(22);
  LossConfig cfg;
  cfg.sce_alpha = 0.0;
  cfg.sce_beta = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto f = random_field(rng, 2, 4, 3, 3);
    const auto labels = detail::random_labels(rng, 2, 3, 3, 3);
    ad::Tape t;
    // With zero base weights only the penalty remains on both sides.
    const double wrap = abstention_wrap(LossKind::sce, t.constant(f), labels, 1.3, NoisePrior{0.0, {}}, cfg).scalar();
    const double dac = dac_loss(t.constant(f), labels, 1.3).scalar() - dac_loss(t.constant(f), labels, 0.0).scalar();
    EXPECT_NEAR(wrap, dac, 1e-12);
  }
}

TEST(Reductions, AdsWithoutAbstentionIsDice) {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    ad::Tape t;
    auto p = ad::softmax_channel(t.constant(detail::random_tensor(rng, Shape{2, 3, 4, 4}, -2.0, 2.0)));
    const auto labels = detail::random_labels(rng, 2, 4, 4, 3);
    auto a = t.constant(Tensor(Shape{2, 3}));
    EXPECT_NEAR(ads_loss(p, a, labels, 4.0, NoisePrior{0.0, {0.0, 0.0, 0.0}}, 1e-6).scalar(), dice(p, labels, 1e-6).item(),
                1e-12);
  }
}

TEST(Reductions, SceWithoutReverseTermIsScaledCrossEntropy) {
  Rng rng(24);
  for (int trial = 0; trial < 10; ++trial) {
    ad::Tape t;
    auto p = ad::softmax_channel(t.constant(detail::random_tensor(rng, Shape{2, 3, 4, 4}, -2.0, 2.0)));
    const auto labels = detail::random_labels(rng, 2, 4, 4, 3);
    EXPECT_NEAR(sce(p, labels, 0.7, 0.0, -4.0).item(), 0.7 * cross_entropy(p, labels).item(), 1e-12);
  }
}

TEST(PenaltyGeometry, ZeroAtPriorMonotoneAround) {
  LossConfig cfg;
  cfg.sce_alpha = 0.0;
  cfg.sce_beta = 0.0;
  for (double eta : {0.05, 0.15, 0.5, 0.9}) {
    auto penalty = [&](double pa) {
      ad::Tape t;
      return abstention_wrap(LossKind::sce, t.constant(pixels({{1.0 - pa, 0.0, pa}})), row({0}), 1.0, NoisePrior{eta, {}}, cfg)
          .scalar();
    };
    EXPECT_NEAR(penalty(eta), 0.0, 1e-15);
    double prev = penalty(0.0);
    for (int i = 1; i < 1000; ++i) {
      const double pa = 0.999 * i / 999.0;
      const double v = penalty(pa);
      if (std::fabs(pa - eta) > 1e-9) {
        EXPECT_GT(v, 0.0);
      }
      if (pa < eta) {
        EXPECT_LT(v, prev);
      } else if (pa - 0.999 / 999.0 > eta) {
        EXPECT_GT(v, prev);
      }
      prev = v;
    }
  }
}

TEST(Equivariance, PixelPermutation) {
  Rng rng(31);
  const std::size_t n = 12, k = 3;
  auto f = random_field(rng, 1, k + 1, 1, n);
  const auto labels = detail::random_labels(rng, 1, 1, n, k);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i-- > 1;) std::swap(perm[i], perm[rng.below(i + 1)]);
  Tensor g(f.shape());
  LabelMask pl = labels;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c <= k; ++c) g.at(0, c, 0, i) = f.at(0, c, 0, perm[i]);
    pl[i] = labels[perm[i]];
  }
  // Class-only field for the non-abstaining losses.
  auto classes = [&](const Tensor& t) {
    Tensor out(Shape{1, k, 1, n});
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += t.at(0, c, 0, i);
      for (std::size_t c = 0; c < k; ++c) out.at(0, c, 0, i) = t.at(0, c, 0, i) / s;
    }
    return out;
  };
  const NoisePrior prior{0.2, {0.1, 0.2, 0.3}};
  const LossConfig cfg;
  auto all = [&](const Tensor& field, const LabelMask& l) {
    ad::Tape t;
    auto p = t.constant(field);
    auto q = t.constant(classes(field));
    auto a = t.constant(Tensor(Shape{1, k}, std::vector<double>{0.1, 0.4, 0.7}));
    return std::vector<double>{cross_entropy(q, l).item(),
                               gce(q, l, 0.5).item(),
                               sce(q, l, 1.0, 1.0, -4.0).item(),
                               dice(q, l, 1e-6).item(),
                               dac_loss(p, l, 0.8).scalar(),
                               idac_loss(p, l, 0.8, prior).scalar(),
                               abstention_wrap(LossKind::gce, p, l, 0.8, prior, cfg).scalar(),
                               abstention_wrap(LossKind::sce, p, l, 0.8, prior, cfg).scalar(),
                               ads_loss(q, a, l, 0.8, prior, 1e-6).scalar()};
  };
  const auto before = all(f, labels), after = all(g, pl);
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_NEAR(before[i], after[i], 1e-12) << i;
    EXPECT_GE(before[i], 0.0) << i;
  }
}

TEST(AbstentionRate, UniformTiesGoToClasses) {
  ad::Tape t;
  auto r = abstention_rate(Tensor(Shape{1, 4, 2, 2}, 0.25));
  EXPECT_DOUBLE_EQ(r.soft, 0.25);
  EXPECT_EQ(r.hard, 0.0);
}

TEST(AbstentionRate, Saturated) {
  Tensor p(Shape{1, 4, 2, 2}, 1e-12);
  for (std::size_t i = 0; i < 4; ++i) p[3 * 4 + i] = 1.0 - 3e-12;
  auto r = abstention_rate(p);
  EXPECT_NEAR(r.soft, 1.0, 1e-11);
  EXPECT_EQ(r.hard, 1.0);
}

TEST(AbstentionRate, MatchesBruteForceCount) {
  Rng rng(41);
  const auto f = random_field(rng, 3, 4, 5, 5, 0.0, 0.8);
  std::size_t count = 0;
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t y = 0; y < 5; ++y)
      for (std::size_t x = 0; x < 5; ++x) {
        const double pa = f.at(b, 3, y, x);
        count += pa > f.at(b, 0, y, x) && pa > f.at(b, 1, y, x) && pa > f.at(b, 2, y, x);
      }
  EXPECT_EQ(abstention_rate(f).hard, static_cast<double>(count) / 75.0);
}

TEST(WarmupLoss, NoGradientIntoAbstention) {
  Rng rng(51);
  const auto labels = detail::random_labels(rng, 2, 3, 3, 3);
  const NoisePrior prior{0.2, {0.1, 0.2, 0.3}};
  for (LossKind kind : {LossKind::dac, LossKind::idac, LossKind::gac, LossKind::sac}) {
    LossConfig cfg;
    cfg.kind = kind;
    ad::Tape t;
    auto logits = t.leaf(detail::random_tensor(rng, Shape{2, 4, 3, 3}, -2.0, 2.0));
    auto out = segmentation_loss(cfg, logits, nullptr, labels, 0.0, prior, true);
    t.backward(out.value);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(logits.grad()[(b * 4 + 3) * 9 + i], 0.0);
  }
  LossConfig cfg;
  cfg.kind = LossKind::ads;
  ad::Tape t;
  auto logits = t.leaf(detail::random_tensor(rng, Shape{2, 3, 3, 3}, -2.0, 2.0));
  auto head = t.leaf(detail::random_tensor(rng, Shape{2, 3}));
  auto a = ad::sigmoid(head);
  auto out = segmentation_loss(cfg, logits, &a, labels, 0.0, prior, true);
  t.backward(out.value);
  for (double g : head.grad().data()) EXPECT_EQ(g, 0.0);
}

TEST(GradientSuite, EveryLossTenSeeds) {
  const auto cases = gradient_cases();
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    if (cases[ci].name.rfind("loss/", 0) != 0) continue;
    for (std::uint64_t s = 0; s < 10; ++s) {
      Rng rng(derive_seed(s, ci));
      auto [x, f] = cases[ci].make(rng);
      EXPECT_LT(ad::grad_check(f, x).max_rel_error, 1e-4) << cases[ci].name << " seed " << s;
    }
  }
}
