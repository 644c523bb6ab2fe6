#include <set>

#include <gtest/gtest.h>

#include "abstain/data.hpp"
#include "abstain/noise.hpp"

using namespace abstain;

namespace {

LabelMask square_mask() {
  LabelMask m(8, 8, 0);
  for (std::size_t y = 2; y < 6; ++y)
    for (std::size_t x = 2; x < 6; ++x) m.at(y, x) = 1;
  return m;
}

std::size_t diff(const LabelMask& a, const LabelMask& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return n;
}

std::vector<LabelMask> scene_masks(std::size_t n, std::uint64_t seed) {
  std::vector<LabelMask> out;
  for (auto& s : generate_dataset(SceneSpec{}, n, seed)) out.push_back(std::move(s.clean_labels));
  return out;
}

}  // namespace

TEST(Morphology, DilateSquare) {
  const auto m = square_mask();
  const auto r = erode_dilate(m, 1, 1, MorphMode::dilate);
  EXPECT_FALSE(r.class_absent);
  EXPECT_EQ(diff(m, r.mask), 20u);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) EXPECT_EQ(r.mask.at(y, x), (y >= 1 && y <= 6 && x >= 1 && x <= 6) ? 1 : 0);
}

TEST(Morphology, DilateClipsAtBorder) {
  LabelMask m(5, 5, 0);
  m.at(0, 0) = 2;
  const auto r = erode_dilate(m, 2, 2, MorphMode::dilate);
  EXPECT_EQ(diff(m, r.mask), 8u);
}

TEST(Morphology, ErodeSquare) {
  const auto m = square_mask();
  const auto r = erode_dilate(m, 1, 1, MorphMode::erode);
  EXPECT_EQ(diff(m, r.mask), 12u);
  EXPECT_EQ(r.mask.at(3, 3), 1);
  EXPECT_EQ(r.mask.at(2, 2), 0);
}

TEST(Morphology, ErodeEmptiesSmallClass) {
  const auto m = square_mask();
  const auto r = erode_dilate(m, 1, 3, MorphMode::erode);
  for (std::size_t i = 0; i < r.mask.size(); ++i) EXPECT_EQ(r.mask[i], 0);
}

TEST(Morphology, ErodeBackfillsByMajority) {
  // Left half class 2, right half class 3, class 1 strip down the middle.
  LabelMask m(6, 7, 0);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 7; ++x) m.at(y, x) = x < 3 ? 2 : x > 3 ? 3 : 1;
  const auto r = erode_dilate(m, 1, 1, MorphMode::erode);
  for (std::size_t y = 0; y < 6; ++y) EXPECT_EQ(r.mask.at(y, 3), 2);  // tie 3 vs 3 -> lowest id
}

TEST(Morphology, FullFrameAndAbsentClass) {
  LabelMask full(6, 6, 1);
  EXPECT_EQ(erode_dilate(full, 1, 2, MorphMode::dilate).mask, full);
  EXPECT_EQ(erode_dilate(full, 1, 2, MorphMode::erode).mask, full);
  const auto r = erode_dilate(square_mask(), 3, 1, MorphMode::dilate);
  EXPECT_TRUE(r.class_absent);
  EXPECT_EQ(r.mask, square_mask());
  EXPECT_THROW(erode_dilate(full, 1, 0, MorphMode::erode), RangeError);
}

TEST(Flip, ZeroAndForced) {
  const auto m = square_mask();
  Rng rng(1);
  EXPECT_EQ(flip_labels(m, 0.0, 2, rng), m);
  Rng rng2(1);
  const auto f = flip_labels(m, 1.0, 2, rng2, true);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(f[i], 1 - m[i]);
  EXPECT_THROW(flip_labels(m, 1.5, 2, rng2), RangeError);
}

TEST(Flip, ComponentsStayWhole) {
  LabelMask m(6, 6, 0);
  for (std::size_t x = 0; x < 6; ++x) m.at(1, x) = 1;
  for (std::size_t x = 0; x < 6; ++x) m.at(4, x) = 2;
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(s);
    const auto f = flip_labels(m, 0.5, 4, rng);
    for (std::size_t y : {1u, 4u}) {
      std::set<int> labels;
      for (std::size_t x = 0; x < 6; ++x) labels.insert(f.at(y, x));
      EXPECT_EQ(labels.size(), 1u);
    }
  }
}

TEST(Flip, MonteCarloExpectedFraction) {
  const auto masks = scene_masks(1, 3);
  const auto& m = masks[0];
  const double p = 0.3;
  double expected = 0.0;
  for (const auto& c : connected_components(m))
    if (c.label != 0) expected += p * static_cast<double>(c.pixels.size());
  expected /= static_cast<double>(m.size());
  double mean = 0.0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    Rng rng(derive_seed(77, s));
    mean += static_cast<double>(diff(m, flip_labels(m, p, 4, rng))) / static_cast<double>(m.size());
  }
  mean /= 1000.0;
  EXPECT_NEAR(mean, expected, 0.02);
}

TEST(Inject, ZeroIsIdentity) {
  const auto masks = scene_masks(3, 4);
  NoiseSpec spec;
  for (const auto& m : masks) {
    auto [noisy, rep] = inject(m, spec, Rng(5));
    EXPECT_EQ(noisy, m);
    EXPECT_EQ(rep.achieved_eta, 0.0);
  }
}

TEST(Inject, ReportMatchesIndependentDiff) {
  const auto masks = scene_masks(20, 5);
  NoiseSpec spec;
  spec.target_eta = 0.15;
  spec = calibrate(masks, spec, 9);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    auto [noisy, rep] = inject(masks[i], spec, mask_rng(9, i));
    EXPECT_EQ(rep.achieved_eta, static_cast<double>(diff(masks[i], noisy)) / static_cast<double>(noisy.size()));
    std::size_t by_class = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_LE(rep.per_class_eta[c], 1.0);
      by_class += static_cast<std::size_t>(std::llround(rep.per_class_eta[c] * static_cast<double>(rep.class_pixels[c])));
    }
    EXPECT_EQ(by_class, rep.changed_pixels);
    for (std::size_t j = 0; j < noisy.size(); ++j) EXPECT_LT(noisy[j], 4);
    if (rep.changed_pixels) {
      EXPECT_NEAR(rep.structural_share + rep.semantic_share, 1.0, 1e-15);
    }
  }
}

TEST(Inject, DeterministicAndSpatiallyCorrelated) {
  const auto masks = scene_masks(10, 6);
  NoiseSpec spec;
  spec.target_eta = 0.05;
  spec = calibrate(masks, spec, 2);
  const auto a = inject_all(masks, spec, 2), b = inject_all(masks, spec, 2);
  EXPECT_EQ(a.masks, b.masks);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    // Changed pixels form fewer 4-connected blobs than there are changed pixels.
    LabelMask changed(masks[i].height(), masks[i].width(), 0);
    std::size_t n = 0;
    for (std::size_t j = 0; j < changed.size(); ++j) n += changed[j] = masks[i][j] != a.masks[i][j];
    if (n == 0) continue;
    std::size_t blobs = 0;
    for (const auto& c : connected_components(changed)) blobs += c.label == 1;
    EXPECT_LT(blobs, n);
  }
}

TEST(Inject, UncalibratedSpecRejected) {
  NoiseSpec spec;
  spec.target_eta = 0.1;
  EXPECT_THROW(inject(square_mask(), spec, Rng(1)), ConfigError);
  spec.target_eta = 0.6;
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(Calibrate, TargetsAndMonotonicity) {
  const auto masks = scene_masks(60, 7);
  NoiseSpec spec;
  std::vector<double> intensity;
  for (double eta : {0.05, 0.15, 0.25}) {
    spec.target_eta = eta;
    const auto c = calibrate(masks, spec, 1);
    EXPECT_NEAR(*c.calibrated_eta, eta, kCalibrationTolerance);
    EXPECT_NEAR(inject_all(masks, c, 1).mean_achieved_eta, eta, kCalibrationTolerance);
    intensity.push_back(*c.intensity);
    const auto again = calibrate(masks, spec, 1);
    EXPECT_EQ(*again.intensity, *c.intensity);
  }
  EXPECT_LE(intensity[0], intensity[1]);
  EXPECT_LE(intensity[1], intensity[2]);
  spec.target_eta = 0.0;
  EXPECT_EQ(*calibrate(masks, spec, 1).intensity, 0.0);
}

TEST(Calibrate, UnreachableReportsRange) {
  std::vector<LabelMask> masks{square_mask()};
  NoiseSpec spec;
  spec.num_classes = 2;
  spec.structural_fraction = 0.0;
  spec.target_eta = 0.45;  // a flipped 16-pixel square changes only 0.25 of the frame
  try {
    calibrate(masks, spec, 0);
    FAIL() << "expected CalibrationError";
  } catch (const CalibrationError& e) {
    EXPECT_NEAR(e.achievable_max(), 0.25, 1e-12);
  }
}
