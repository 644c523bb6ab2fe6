#include <gtest/gtest.h>

#include "abstain/report.hpp"
#include "abstain/trainer.hpp"

using namespace abstain;

namespace {

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.scene.height = c.scene.width = 12;
  c.n_train = 16;
  c.n_val = 4;
  c.n_test = 4;
  c.hidden_channels = 4;
  c.pool_size = 4;
  c.epochs = 4;
  c.warmup = 2;
  c.batch_size = 4;
  c.max_radius = 2;
  return c;
}

bool same_record(const RunRecord& a, const RunRecord& b) {
  if (a.rows.size() != b.rows.size() || a.test_miou != b.test_miou || a.failed != b.failed) return false;
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    const auto &x = a.rows[i], &y = b.rows[i];
    if (x.epoch != y.epoch || x.train_loss != y.train_loss || x.val_miou != y.val_miou || x.abst_soft != y.abst_soft ||
        x.abst_hard != y.abst_hard || x.alpha != y.alpha || x.lr != y.lr)
      return false;
  }
  return true;
}

}  // namespace

TEST(TrainOne, CleanCrossEntropy) {
  const auto cfg = tiny();
  const auto splits = make_splits(cfg);
  const auto r = train_one(cfg, RunSpec{LossKind::ce, 0.0, 0, {}}, splits);
  ASSERT_FALSE(r.record.failed);
  ASSERT_EQ(r.record.rows.size(), 4u);
  for (std::size_t e = 0; e < 4; ++e) {
    const auto& row = r.record.rows[e];
    EXPECT_EQ(row.epoch, static_cast<int>(e));
    EXPECT_EQ(row.abst_soft, 0.0);
    EXPECT_EQ(row.abst_hard, 0.0);
    EXPECT_EQ(row.alpha, 0.0);
    EXPECT_EQ(row.lr, 0.003);
    EXPECT_GE(row.val_miou, 0.0);
    EXPECT_LE(row.val_miou, 1.0);
  }
  EXPECT_TRUE(same_record(r.record, train_one(cfg, RunSpec{LossKind::ce, 0.0, 0, {}}, splits).record));
  EXPECT_TRUE(r.params == train_one(cfg, RunSpec{LossKind::ce, 0.0, 0, {}}, splits).params);
}

TEST(TrainOne, LossDecreasesOnSmallCleanSet) {
  auto cfg = tiny();
  cfg.n_train = 10;
  cfg.epochs = 5;
  cfg.batch_size = 5;
  const auto r = train_one(cfg, RunSpec{LossKind::ce, 0.0, 1, {}}, make_splits(cfg));
  EXPECT_LT(r.record.rows.back().train_loss, r.record.rows.front().train_loss);
}

TEST(TrainOne, WarmupOnlyRunHasZeroAlpha) {
  auto cfg = tiny();
  cfg.warmup = 10;
  cfg.epochs = 3;
  const auto r = train_one(cfg, RunSpec{LossKind::dac, 0.0, 0, {}}, make_splits(cfg));
  ASSERT_EQ(r.record.rows.size(), 3u);
  for (const auto& row : r.record.rows) EXPECT_EQ(row.alpha, 0.0);
}

TEST(TrainOne, WarmupBlocksAbstentionGradient) {
  const auto cfg = tiny();
  const auto splits = make_splits(cfg);
  for (LossKind kind : {LossKind::dac, LossKind::idac, LossKind::gac, LossKind::sac}) {
    std::size_t warm = 0, live = 0;
    double after = 0.0;
    auto observer = [&](const BatchEvent& ev) {
      const auto& g = ev.logits_grad;
      const std::size_t nb = g.dim(0), nc = g.dim(1), plane = g.dim(2) * g.dim(3);
      double mag = 0.0;
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t i = 0; i < plane; ++i) mag += std::fabs(g[(b * nc + nc - 1) * plane + i]);
      if (ev.warmup) {
        EXPECT_EQ(mag, 0.0) << to_string(kind) << " epoch " << ev.epoch;
        ++warm;
      } else {
        after += mag;
        ++live;
      }
    };
    train_one(cfg, RunSpec{kind, 0.1, 0, NoisePrior{0.1, {}}}, splits, observer);
    EXPECT_GT(warm, 0u);
    EXPECT_GT(live, 0u);
    EXPECT_GT(after, 0.0) << to_string(kind);
  }
}

TEST(TrainOne, AdsHeadUntouchedDuringWarmup) {
  auto cfg = tiny();
  cfg.warmup = 10;
  cfg.epochs = 2;
  const auto splits = make_splits(cfg);
  const auto r = train_one(cfg, RunSpec{LossKind::ads, 0.0, 0, NoisePrior{0.1, {}}}, splits);
  // AdamW with zero gradient and zero-initialised bias leaves the bias at exactly 0.
  for (double v : r.params["head.bias"].data()) EXPECT_EQ(v, 0.0);
}

TEST(TrainOne, AlphaColumnMatchesPreview) {
  auto cfg = tiny();
  cfg.epochs = 6;
  const auto splits = make_splits(cfg);
  const auto gac = train_one(cfg, RunSpec{LossKind::gac, 0.0, 0, {}}, splits);
  const auto& s = cfg.schedules.at(LossKind::gac);
  const auto pts = preview(AlphaSchedule{s.alpha_final, cfg.warmup, cfg.epochs, s.gamma});
  for (const auto& row : gac.record.rows) EXPECT_EQ(row.alpha, pts[row.epoch].alpha);

  const auto dac = train_one(cfg, RunSpec{LossKind::dac, 0.0, 0, {}}, splits);
  ASSERT_TRUE(dac.legacy_beta_ma);
  const auto lp = preview(cfg.legacy_config(LossKind::dac), *dac.legacy_beta_ma);
  for (const auto& row : dac.record.rows) EXPECT_NEAR(row.alpha, lp[row.epoch].alpha, 1e-12);

  const auto idac = train_one(cfg, RunSpec{LossKind::idac, 0.0, 0, {}}, splits);
  for (const auto& row : idac.record.rows)
    EXPECT_EQ(row.alpha, row.epoch < cfg.warmup ? 0.0 : cfg.schedules.at(LossKind::idac).alpha_final);
}

TEST(TrainOne, HardRateMatchesArgmaxAudit) {
  const auto cfg = tiny();
  const auto splits = make_splits(cfg);
  int audited = 0;
  auto observer = [&](const BatchEvent& ev) {
    if (audited >= 3) return;
    ++audited;
    ad::Tape t;
    const auto p = ad::softmax_channel(t.constant(ev.logits)).value();
    const std::size_t nb = p.dim(0), nc = p.dim(1), plane = p.dim(2) * p.dim(3);
    std::size_t hard = 0;
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < nc; ++c)
          if (p[(b * nc + c) * plane + i] > p[(b * nc + best) * plane + i]) best = c;
        hard += best == nc - 1;
      }
    EXPECT_EQ(ev.loss.abstention_rate_hard, static_cast<double>(hard) / static_cast<double>(nb * plane));
  };
  train_one(cfg, RunSpec{LossKind::gac, 0.0, 0, {}}, splits, observer);
  EXPECT_EQ(audited, 3);
}

TEST(Noise, LabelsDependOnEtaAndSeedOnly) {
  const auto cfg = tiny();
  const auto clean = make_splits(cfg);
  const auto spec = calibrate(clean_masks(clean.train), cfg.noise_spec(0.15), cfg.calibration_seed);
  const auto a = attach_noise(clean, spec, 0.15, 3), b = attach_noise(clean, spec, 0.15, 3);
  const auto c = attach_noise(clean, spec, 0.15, 4);
  bool differs = false;
  for (std::size_t i = 0; i < clean.train.size(); ++i) {
    EXPECT_EQ(*a.splits.train[i].noisy_labels, *b.splits.train[i].noisy_labels);
    differs |= !(*a.splits.train[i].noisy_labels == *c.splits.train[i].noisy_labels);
  }
  EXPECT_TRUE(differs);
  for (const auto& s : a.splits.val) EXPECT_FALSE(s.noisy_labels);
  for (const auto& s : a.splits.test) EXPECT_FALSE(s.noisy_labels);
}

TEST(Prior, Defaults) {
  auto cfg = tiny();
  CorruptionReport rep;
  rep.per_class_eta = {0.05, 0.3, 0.995, 0.2};
  auto p = resolve_prior(cfg, 0.15, rep);
  EXPECT_EQ(p.eta_tilde, 0.15);
  ASSERT_EQ(p.eta_c.size(), 4u);
  EXPECT_EQ(p.eta_c[1], 0.3);
  EXPECT_LT(p.eta_c[2], 1.0);
  cfg.eta_tilde = 0.1;
  cfg.eta_c = std::vector<double>{0.1, 0.1, 0.1, 0.1};
  p = resolve_prior(cfg, 0.15, rep);
  EXPECT_EQ(p.eta_tilde, 0.1);
  EXPECT_EQ(p.eta_c[2], 0.1);
}

TEST(Sweep, DegenerateEtaGrid) {
  auto cfg = tiny();
  cfg.epochs = 2;
  cfg.warmup = 1;
  const auto r = sweep(cfg, {LossKind::ce}, {0.0}, {0}, 1);
  ASSERT_EQ(r.summary.size(), 1u);
  EXPECT_EQ(r.summary[0].runs, 1u);
  EXPECT_TRUE(r.drop_rates.empty());
  EXPECT_EQ(r.drop_rate_errors.count(LossKind::ce), 1u);
}

TEST(Sweep, JobCountDoesNotChangeResults) {
  auto cfg = tiny();
  cfg.epochs = 2;
  cfg.warmup = 1;
  const std::vector<LossKind> losses{LossKind::ce, LossKind::gac};
  const std::vector<double> etas{0.0, 0.1};
  const auto a = sweep(cfg, losses, etas, {0, 1}, 1);
  const auto b = sweep(cfg, losses, etas, {0, 1}, 3);
  EXPECT_EQ(a.cells.size(), 8u);
  EXPECT_EQ(sweep_summary_json(a).dump(), sweep_summary_json(b).dump());
  std::ostringstream ca, cb;
  write_curves_csv(ca, a);
  write_curves_csv(cb, b);
  EXPECT_EQ(ca.str(), cb.str());
  EXPECT_EQ(a.drop_rates.size(), 2u);
  EXPECT_FALSE(std::isnan(a.drop_rates.at(LossKind::ce).half_width));
}
