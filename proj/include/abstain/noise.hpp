#pragma once

// Synthetic label noise for segmentation masks.
//
// Structural noise erodes or dilates whole class regions with a square structuring
// element; semantic noise relabels whole 4-connected components. Both are driven by one
// intensity scalar, which calibrate() bisects until the mean changed-pixel fraction over
// a mask collection hits the target. Throughout, eta means the fraction of pixels whose
// label differs from the clean mask.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "abstain/error.hpp"
#include "abstain/rng.hpp"
#include "abstain/tensor.hpp"

namespace abstain {

enum class MorphMode { erode, dilate };

struct MorphResult {
  LabelMask mask;
  bool class_absent = false;  // the class had no pixels; mask returned unchanged
};

namespace detail {

// Square-window max filter of a 0/1 grid, window clipped at the frame.
inline std::vector<std::uint8_t> box_max(const std::vector<std::uint8_t>& in, std::size_t h, std::size_t w, std::size_t r) {
  std::vector<std::uint8_t> tmp(in.size()), out(in.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t x0 = x >= r ? x - r : 0, x1 = std::min(w - 1, x + r);
      std::uint8_t v = 0;
      for (std::size_t xx = x0; xx <= x1 && !v; ++xx) v = in[y * w + xx];
      tmp[y * w + x] = v;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t y0 = y >= r ? y - r : 0, y1 = std::min(h - 1, y + r);
      std::uint8_t v = 0;
      for (std::size_t yy = y0; yy <= y1 && !v; ++yy) v = tmp[yy * w + x];
      out[y * w + x] = v;
    }
  return out;
}

}  // namespace detail

/// Binary erosion / dilation of class `class_id` with a (2r+1)^2 square. Dilation
/// overwrites covered pixels with the class. Eroded pixels are refilled from the outside
/// in: each takes the majority label among its already-settled 8-neighbours of other
/// classes (ties -> lowest class id). Out-of-frame pixels never erode a region.
inline MorphResult erode_dilate(const LabelMask& mask, std::uint8_t class_id, std::size_t radius, MorphMode mode) {
  if (radius < 1) throw RangeError("erode_dilate: radius must be >= 1");
  if (mask.batch() != 1) throw DimensionError("erode_dilate expects a single mask", "batch");
  const std::size_t h = mask.height(), w = mask.width(), n = h * w;
  std::vector<std::uint8_t> ind(n);
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) any |= (ind[i] = mask[i] == class_id) != 0;
  if (!any) return {mask, true};

  LabelMask out = mask;
  if (mode == MorphMode::dilate) {
    const auto grown = detail::box_max(ind, h, w, radius);
    for (std::size_t i = 0; i < n; ++i)
      if (grown[i]) out[i] = class_id;
    return {std::move(out), false};
  }

  // Erosion: a class pixel survives iff no other-class pixel lies in its window.
  std::vector<std::uint8_t> other(n);
  for (std::size_t i = 0; i < n; ++i) other[i] = !ind[i];
  const auto touched = detail::box_max(other, h, w, radius);
  std::vector<std::uint8_t> pending(n, 0);
  std::size_t remaining = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (ind[i] && touched[i]) {
      pending[i] = 1;
      ++remaining;
    }

  std::vector<std::pair<std::size_t, std::uint8_t>> settle;
  std::vector<std::size_t> votes(256);
  while (remaining > 0) {
    settle.clear();
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        if (!pending[i]) continue;
        std::fill(votes.begin(), votes.end(), 0);
        bool seen = false;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (!dy && !dx) continue;
            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
            const std::size_t j = static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx);
            if (pending[j] || out[j] == class_id) continue;
            ++votes[out[j]];
            seen = true;
          }
        if (!seen) continue;
        const auto best = std::max_element(votes.begin(), votes.end()) - votes.begin();
        settle.emplace_back(i, static_cast<std::uint8_t>(best));
      }
    if (settle.empty()) break;
    for (auto [i, c] : settle) {
      out[i] = c;
      pending[i] = 0;
      --remaining;
    }
  }
  return {std::move(out), false};
}

struct Component {
  std::uint8_t label;
  std::vector<std::size_t> pixels;
};

/// 4-connected components of equal labels, in raster order of their first pixel.
inline std::vector<Component> connected_components(const LabelMask& mask) {
  const std::size_t h = mask.height(), w = mask.width() , n = h * w;
  std::vector<char> seen(n, 0);
  std::vector<Component> comps;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < n; ++s) {
    if (seen[s]) continue;
    Component c{mask[s], {}};
    seen[s] = 1;
    stack.push_back(s);
    while (!stack.empty()) {
      const auto i = stack.back();
      stack.pop_back();
      c.pixels.push_back(i);
      const std::size_t y = i / w, x = i % w;
      auto visit = [&](std::size_t j) {
        if (!seen[j] && mask[j] == c.label) {
          seen[j] = 1;
          stack.push_back(j);
        }
      };
      if (y > 0) visit(i - w);
      if (y + 1 < h) visit(i + w);
      if (x > 0) visit(i - 1);
      if (x + 1 < w) visit(i + 1);
    }
    comps.push_back(std::move(c));
  }
  return comps;
}

/// Component-level label flipping: each 4-connected component (background components
/// only when `include_background`) is relabelled, with probability p_flip, to a class
/// drawn uniformly from the other num_classes - 1 classes. Two draws are consumed per
/// eligible component whatever p_flip is, so runs at different p_flip share randomness.
inline LabelMask flip_labels(const LabelMask& mask, double p_flip, std::size_t num_classes, Rng& rng,
                             bool include_background = false) {
  if (!(p_flip >= 0.0 && p_flip <= 1.0)) throw RangeError("flip_labels: p_flip must lie in [0, 1]");
  if (num_classes < 2) throw ConfigError("flip_labels: need at least 2 classes");
  LabelMask out = mask;
  for (const auto& comp : connected_components(mask)) {
    if (comp.label == 0 && !include_background) continue;
    const double u = rng.uniform();
    const auto j = static_cast<std::uint8_t>(rng.below(num_classes - 1));
    if (u >= p_flip) continue;
    const std::uint8_t target = j < comp.label ? j : static_cast<std::uint8_t>(j + 1);
    for (auto i : comp.pixels) out[i] = target;
  }
  return out;
}

struct NoiseSpec {
  double target_eta = 0.0;
  double structural_fraction = 0.5;  // share of the intensity driving morphology
  std::size_t max_radius = 6;
  std::size_t num_classes = 4;
  bool flip_background = false;
  std::optional<double> intensity;      // set by calibrate()
  std::optional<double> calibrated_eta;  // mean achieved eta at `intensity` on the calibration set

  void validate() const {
    if (!(target_eta >= 0.0 && target_eta < 0.5)) throw ConfigError("noise: target eta must lie in [0, 0.5)");
    if (!(structural_fraction >= 0.0 && structural_fraction <= 1.0)) throw ConfigError("noise: structural_fraction must lie in [0, 1]");
    if (max_radius < 1) throw ConfigError("noise: max_radius must be >= 1");
    if (num_classes < 2) throw ConfigError("noise: need at least 2 classes");
  }

  // Mean morphology radius at intensity s.
  double radius_scale(double s) const { return 2.0 * s * structural_fraction * static_cast<double>(max_radius); }
  double flip_probability(double s) const { return std::min(1.0, 2.0 * s * (1.0 - structural_fraction)); }
};

struct CorruptionReport {
  double achieved_eta = 0.0;          // changed pixels / pixels
  std::vector<double> per_class_eta;  // changed / total, by clean class
  double structural_share = 0.0;      // share of changed pixels already changed by morphology
  double semantic_share = 0.0;        // remaining share, introduced by flips
  std::size_t changed_pixels = 0;
  std::size_t total_pixels = 0;
  std::vector<std::size_t> class_pixels;   // clean pixel count per class
  std::vector<std::size_t> class_changed;  // changed pixel count per clean class
};

inline nlohmann::json to_json(const CorruptionReport& r) {
  return {{"achieved_eta", r.achieved_eta},
          {"per_class_eta", r.per_class_eta},
          {"structural_share", r.structural_share},
          {"semantic_share", r.semantic_share}};
}

namespace detail {

inline CorruptionReport compare_masks(const LabelMask& clean, const LabelMask& after_struct, const LabelMask& noisy,
                                      std::size_t k) {
  CorruptionReport r;
  r.class_pixels.assign(k, 0);
  r.class_changed.assign(k, 0);
  std::size_t structural = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    ++r.class_pixels[clean[i]];
    if (noisy[i] != clean[i]) {
      ++r.changed_pixels;
      ++r.class_changed[clean[i]];
      structural += after_struct[i] != clean[i];
    }
  }
  r.total_pixels = clean.size();
  r.achieved_eta = static_cast<double>(r.changed_pixels) / static_cast<double>(r.total_pixels);
  r.per_class_eta.assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c)
    if (r.class_pixels[c]) r.per_class_eta[c] = static_cast<double>(r.class_changed[c]) / static_cast<double>(r.class_pixels[c]);
  if (r.changed_pixels) {
    r.structural_share = static_cast<double>(structural) / static_cast<double>(r.changed_pixels);
    r.semantic_share = 1.0 - r.structural_share;
  }
  return r;
}

// Corruption at an explicit intensity. Streams 1 and 2 of `rng` feed morphology and
// flips respectively, with a fixed number of draws per class / component.
inline std::pair<LabelMask, CorruptionReport> corrupt(const LabelMask& clean, const NoiseSpec& spec, double intensity, const Rng& rng) {
  clean.validate(spec.num_classes);
  LabelMask m = clean;
  if (intensity > 0.0) {
    Rng srng = rng.fork(1);
    const double scale = spec.radius_scale(intensity);
    for (std::size_t c = 1; c < spec.num_classes; ++c) {
      const bool dilate = srng.uniform() < 0.5;
      const double spread = srng.uniform(0.5, 1.5);
      const double jitter = srng.uniform();
      const auto r = static_cast<std::size_t>(std::min(static_cast<double>(spec.max_radius), std::floor(scale * spread + jitter)));
      if (r == 0) continue;
      m = erode_dilate(m, static_cast<std::uint8_t>(c), r, dilate ? MorphMode::dilate : MorphMode::erode).mask;
    }
  }
  const LabelMask after_struct = m;
  if (intensity > 0.0) {
    Rng frng = rng.fork(2);
    m = flip_labels(m, spec.flip_probability(intensity), spec.num_classes, frng, spec.flip_background);
  }
  auto report = compare_masks(clean, after_struct, m, spec.num_classes);
  return {std::move(m), std::move(report)};
}

}  // namespace detail

/// Applies structural then semantic noise at the spec's calibrated intensity.
/// target_eta == 0 is the identity.
inline std::pair<LabelMask, CorruptionReport> inject(const LabelMask& mask, const NoiseSpec& spec, const Rng& rng) {
  spec.validate();
  if (spec.target_eta == 0.0) return detail::corrupt(mask, spec, 0.0, rng);
  if (!spec.intensity) throw ConfigError("inject: noise spec is not calibrated");
  return detail::corrupt(mask, spec, *spec.intensity, rng);
}

// Per-mask stream for mask `index` under `base_seed`.
inline Rng mask_rng(std::uint64_t base_seed, std::size_t index) { return Rng(derive_seed(base_seed, index)); }

struct CollectionCorruption {
  std::vector<LabelMask> masks;
  CorruptionReport pooled;           // pixel-pooled over the collection
  double mean_achieved_eta = 0.0;    // mean of per-mask eta
};

namespace detail {

inline CollectionCorruption corrupt_all(std::span<const LabelMask> masks, const NoiseSpec& spec, double intensity,
                                        std::uint64_t base_seed, bool keep_masks) {
  CollectionCorruption out;
  const std::size_t k = spec.num_classes;
  out.pooled.class_pixels.assign(k, 0);
  out.pooled.class_changed.assign(k, 0);
  double eta_sum = 0.0, structural = 0.0;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    auto [noisy, rep] = corrupt(masks[i], spec, intensity, mask_rng(base_seed, i));
    eta_sum += rep.achieved_eta;
    out.pooled.changed_pixels += rep.changed_pixels;
    out.pooled.total_pixels += rep.total_pixels;
    structural += rep.structural_share * static_cast<double>(rep.changed_pixels);
    for (std::size_t c = 0; c < k; ++c) {
      out.pooled.class_pixels[c] += rep.class_pixels[c];
      out.pooled.class_changed[c] += rep.class_changed[c];
    }
    if (keep_masks) out.masks.push_back(std::move(noisy));
  }
  auto& p = out.pooled;
  if (p.total_pixels) p.achieved_eta = static_cast<double>(p.changed_pixels) / static_cast<double>(p.total_pixels);
  p.per_class_eta.assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c)
    if (p.class_pixels[c]) p.per_class_eta[c] = static_cast<double>(p.class_changed[c]) / static_cast<double>(p.class_pixels[c]);
  if (p.changed_pixels) {
    p.structural_share = structural / static_cast<double>(p.changed_pixels);
    p.semantic_share = 1.0 - p.structural_share;
  }
  out.mean_achieved_eta = masks.empty() ? 0.0 : eta_sum / static_cast<double>(masks.size());
  return out;
}

}  // namespace detail

/// Corrupts every mask with its own derived stream (mask i uses mask_rng(base_seed, i)).
inline CollectionCorruption inject_all(std::span<const LabelMask> masks, const NoiseSpec& spec, std::uint64_t base_seed) {
  spec.validate();
  if (spec.target_eta > 0.0 && !spec.intensity) throw ConfigError("inject_all: noise spec is not calibrated");
  return detail::corrupt_all(masks, spec, spec.target_eta == 0.0 ? 0.0 : *spec.intensity, base_seed, true);
}

inline constexpr double kCalibrationTolerance = 0.005;
inline constexpr int kCalibrationRounds = 30;

/// Bisects the intensity in [0, 1] until the mean achieved eta over `masks` is within
/// kCalibrationTolerance of the target. Throws CalibrationError when even full intensity
/// falls short. If 30 rounds do not reach the tolerance, the closest intensity seen is kept
/// and calibrated_eta records what it achieves.
inline NoiseSpec calibrate(std::span<const LabelMask> masks, NoiseSpec spec, std::uint64_t seed) {
  spec.validate();
  if (masks.empty()) throw ConfigError("calibrate: empty mask collection");
  if (spec.target_eta == 0.0) {
    spec.intensity = 0.0;
    spec.calibrated_eta = 0.0;
    return spec;
  }
  auto eval = [&](double s) { return detail::corrupt_all(masks, spec, s, seed, false).mean_achieved_eta; };
  double lo = 0.0, hi = 1.0;
  const double eta_hi = eval(hi);
  if (eta_hi < spec.target_eta - kCalibrationTolerance) throw CalibrationError(spec.target_eta, 0.0, eta_hi);
  double best_s = hi, best_eta = eta_hi;
  for (int round = 0; round < kCalibrationRounds; ++round) {
    const double mid = 0.5 * (lo + hi);
    const double eta = eval(mid);
    if (std::fabs(eta - spec.target_eta) < std::fabs(best_eta - spec.target_eta)) {
      best_s = mid;
      best_eta = eta;
    }
    if (std::fabs(eta - spec.target_eta) <= kCalibrationTolerance) break;
    (eta < spec.target_eta ? lo : hi) = mid;
  }
  spec.intensity = best_s;
  spec.calibrated_eta = best_eta;
  return spec;
}

}  // namespace abstain
