#pragma once

// Segmentation losses: the non-abstaining baselines (CE, GCE, SCE, soft Dice), the
// pixel-wise abstaining losses (DAC, IDAC and the generic abstention wrapper behind
// GAC / SAC) and the class-wise abstaining Dice segmenter (ADS).
//
// Pixel-wise abstaining losses take a [b, k+1, h, w] probability field whose last
// channel is the abstention probability. Every log argument is floored at kLogFloor
// and the abstention probability is capped at 1 - kLogFloor before use.

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "abstain/autodiff.hpp"
#include "abstain/error.hpp"
#include "abstain/tensor.hpp"

namespace abstain {

inline constexpr double kLogFloor = 1e-12;

enum class LossKind { ce, dac, idac, gce, gac, sce, sac, dice, ads };

inline constexpr std::array<LossKind, 9> kAllLosses = {LossKind::ce,  LossKind::dac, LossKind::idac,
                                                       LossKind::gce, LossKind::gac, LossKind::sce,
                                                       LossKind::sac, LossKind::dice, LossKind::ads};

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::ce: return "ce";
    case LossKind::dac: return "dac";
    case LossKind::idac: return "idac";
    case LossKind::gce: return "gce";
    case LossKind::gac: return "gac";
    case LossKind::sce: return "sce";
    case LossKind::sac: return "sac";
    case LossKind::dice: return "dice";
    case LossKind::ads: return "ads";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
  for (auto k : kAllLosses)
    if (to_string(k) == s) return k;
  throw ConfigError("unknown loss kind '" + std::string(s) + "'");
}

enum class AbstentionMode { none, pixel, classwise };

inline AbstentionMode abstention_mode(LossKind k) {
  switch (k) {
    case LossKind::dac:
    case LossKind::idac:
    case LossKind::gac:
    case LossKind::sac: return AbstentionMode::pixel;
    case LossKind::ads: return AbstentionMode::classwise;
    default: return AbstentionMode::none;
  }
}

inline bool is_abstaining(LossKind k) { return abstention_mode(k) != AbstentionMode::none; }

struct LossConfig {
  LossKind kind = LossKind::ce;
  double q = 0.5;           // GCE exponent, (0, 1]
  double sce_alpha = 1.0;   // CE weight in SCE
  double sce_beta = 1.0;    // reverse-CE weight in SCE
  double dice_eps = 1e-6;   // soft-dice smoothing
  double rce_floor = -4.0;  // stands in for log(0) in reverse CE

  void validate() const {
    if (!(q > 0.0 && q <= 1.0)) throw ConfigError("loss.q must lie in (0, 1], got " + std::to_string(q));
    if (!(sce_alpha >= 0.0) || !(sce_beta >= 0.0)) throw ConfigError("loss.sce_alpha / loss.sce_beta must be >= 0");
    if (!(dice_eps > 0.0)) throw ConfigError("loss.dice_eps must be > 0");
    if (!(rce_floor < 0.0)) throw ConfigError("loss.rce_floor must be < 0");
  }
};

struct NoisePrior {
  double eta_tilde = 0.0;       // global expected noise rate
  std::vector<double> eta_c;    // per-class expected noise rates (ADS)

  void validate(std::size_t num_classes = 0) const {
    if (!(eta_tilde >= 0.0 && eta_tilde < 1.0)) throw ConfigError("prior.eta_tilde must lie in [0, 1)");
    for (double e : eta_c)
      if (!(e >= 0.0 && e < 1.0)) throw ConfigError("prior.eta_c entries must lie in [0, 1)");
    if (num_classes && !eta_c.empty() && eta_c.size() != num_classes) {
      throw ConfigError("prior.eta_c has " + std::to_string(eta_c.size()) + " entries, expected " +
                        std::to_string(num_classes));
    }
  }
};

struct LossOutput {
  ad::Var value;
  double abstention_rate_soft = 0.0;  // mean abstention probability
  double abstention_rate_hard = 0.0;  // share of argmax-abstain pixels (classwise: share of a_c > 0.5)

  double scalar() const { return value.item(); }
};

struct AbstentionRate {
  double soft = 0.0;
  double hard = 0.0;
};

/// Soft and hard abstention rate of a [b, k+1, h, w] probability field. The hard rate
/// counts pixels whose argmax is the last channel; ties go to the lowest index.
inline AbstentionRate abstention_rate(const Tensor& probs) {
  if (probs.rank() != 4 || probs.dim(1) < 2) throw DimensionError("abstention_rate: expected [b, k+1, h, w] probabilities");
  const std::size_t nb = probs.dim(0), nc = probs.dim(1), plane = probs.dim(2) * probs.dim(3);
  const std::size_t k = nc - 1;
  double soft = 0.0;
  std::size_t hard = 0;
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      double bv = probs[b * nc * plane + i];
      for (std::size_t c = 1; c < nc; ++c) {
        const double v = probs[(b * nc + c) * plane + i];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      soft += probs[(b * nc + k) * plane + i];
      hard += best == k;
    }
  const double n = static_cast<double>(nb * plane);
  return {soft / n, static_cast<double>(hard) / n};
}

namespace detail {

inline void check_labels_below(const LabelMask& labels, std::size_t k, const char* op) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) {
      throw RangeError(std::string(op) + ": label " + std::to_string(labels[i]) + " at pixel " + std::to_string(i) +
                       " outside the class range [0," + std::to_string(k) + ")");
    }
  }
}

inline std::size_t channels(const ad::Var& probs, const char* op) {
  if (probs.shape().size() != 4) throw DimensionError(op, "rank", 4, probs.shape().size());
  return probs.shape()[1];
}

// Per-pixel -log(g), g already floored.
inline ad::Var ce_map(ad::Var g) { return ad::scale(ad::log(g), -1.0); }

// Per-pixel (1 - g^q) / q.
inline ad::Var gce_map(ad::Var g, double q) { return ad::scale(ad::one_minus(ad::pow_scalar(g, q)), 1.0 / q); }

// Per-pixel a * (-log g) + b * (-rce_floor) * (1 - g).
inline ad::Var sce_map(ad::Var g, double a, double b, double rce_floor) {
  return ad::add(ad::scale(ce_map(g), a), ad::scale(ad::one_minus(g), -rce_floor * b));
}

// Per-class soft-dice losses 1 - (2 I_c + eps) / (P_c + T_c + eps), sums over the whole batch.
inline ad::Var dice_per_class(ad::Var probs, const LabelMask& labels, double eps) {
  const std::size_t k = channels(probs, "dice");
  check_labels_below(labels, k, "dice");
  auto& tape = probs.tape();
  const Tensor onehot = one_hot(labels, k);
  if (onehot.shape() != probs.shape()) throw DimensionError("dice: label grid does not match probabilities " + shape_str(probs.shape()));
  Tensor target_sum(Shape{k});
  for (std::size_t i = 0; i < labels.size(); ++i) target_sum[labels[i]] += 1.0;
  auto inter = ad::channel_sum(ad::mul(probs, tape.constant(onehot)));
  auto pred = ad::channel_sum(probs);
  auto num = ad::add_scalar(ad::scale(inter, 2.0), eps);
  auto den = ad::add_scalar(ad::add(pred, tape.constant(std::move(target_sum))), eps);
  return ad::one_minus(ad::div(num, den));
}

// Splits a [b, k+1, h, w] field into the floored keep-probability 1 - p_{k+1} and the
// floored renormalized target probability p_t / (1 - p_{k+1}).
struct AbstainParts {
  ad::Var abstain;  // p_{k+1}, [b,1,h,w]
  ad::Var keep;     // max(1 - p_{k+1}, kLogFloor)
  ad::Var target;   // max(p_t / keep, kLogFloor)
};

inline AbstainParts split_abstain(ad::Var probs, const LabelMask& labels, const char* op) {
  const std::size_t nc = channels(probs, op);
  if (nc < 3) throw DimensionError(op, "channel", 3, nc);
  check_labels_below(labels, nc - 1, op);
  auto pa = ad::slice_channels(probs, nc - 1, 1);
  auto keep = ad::clamp_min(ad::one_minus(pa), kLogFloor);
  auto target = ad::clamp_min(ad::div(ad::gather_class(probs, labels), keep), kLogFloor);
  return {pa, keep, target};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Non-abstaining losses over [b, k, h, w] probabilities.

inline ad::Var cross_entropy(ad::Var probs, const LabelMask& labels) {
  auto g = ad::clamp_min(ad::gather_class(probs, labels), kLogFloor);
  return ad::reduce_mean(detail::ce_map(g));
}

inline ad::Var gce(ad::Var probs, const LabelMask& labels, double q) {
  if (!(q > 0.0 && q <= 1.0)) throw ConfigError("gce: q must lie in (0, 1]");
  auto g = ad::clamp_min(ad::gather_class(probs, labels), kLogFloor);
  return ad::reduce_mean(detail::gce_map(g, q));
}

inline ad::Var sce(ad::Var probs, const LabelMask& labels, double a, double b, double rce_floor) {
  if (!(a >= 0.0 && b >= 0.0)) throw ConfigError("sce: weights must be >= 0");
  if (!(rce_floor < 0.0)) throw ConfigError("sce: rce_floor must be < 0");
  auto g = ad::clamp_min(ad::gather_class(probs, labels), kLogFloor);
  return ad::reduce_mean(detail::sce_map(g, a, b, rce_floor));
}

inline ad::Var dice(ad::Var probs, const LabelMask& labels, double eps) {
  if (!(eps > 0.0)) throw ConfigError("dice: eps must be > 0");
  return ad::reduce_mean(detail::dice_per_class(probs, labels, eps));
}

// ---------------------------------------------------------------------------
// Abstaining losses.

/// Deep abstaining classifier: (1 - p_{k+1}) * CE(renormalized) + alpha * log(1 / (1 - p_{k+1})).
inline LossOutput dac_loss(ad::Var probs, const LabelMask& labels, double alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("dac_loss: alpha must be >= 0");
  auto parts = detail::split_abstain(probs, labels, "dac_loss");
  auto first = ad::mul(parts.keep, detail::ce_map(parts.target));
  auto penalty = ad::scale(ad::log(parts.keep), -alpha);
  const auto rate = abstention_rate(probs.value());
  return {ad::reduce_mean(ad::add(first, penalty)), rate.soft, rate.hard};
}

/// Informed DAC: DAC's first term plus alpha * (eta_tilde - eta_hat)^2, where eta_hat is
/// the batch's mean abstention probability (one penalty per batch).
inline LossOutput idac_loss(ad::Var probs, const LabelMask& labels, double alpha, const NoisePrior& prior) {
  if (!(alpha >= 0.0)) throw ConfigError("idac_loss: alpha must be >= 0");
  prior.validate();
  auto parts = detail::split_abstain(probs, labels, "idac_loss");
  auto first = ad::reduce_mean(ad::mul(parts.keep, detail::ce_map(parts.target)));
  auto eta_hat = ad::reduce_mean(parts.abstain);
  auto gap = ad::add_scalar(ad::scale(eta_hat, -1.0), prior.eta_tilde);
  auto penalty = ad::scale(ad::mul(gap, gap), alpha);
  const auto rate = abstention_rate(probs.value());
  return {ad::add(first, penalty), rate.soft, rate.hard};
}

/// Generic abstention wrapper around a base loss L_X:
///   (1 - p_{k+1}) * L_X(renormalized probs) + alpha * |log((1 - eta_tilde) / (1 - p_{k+1}))|.
/// base = gce gives GAC, base = sce gives SAC.
inline LossOutput abstention_wrap(LossKind base, ad::Var probs, const LabelMask& labels, double alpha,
                                  const NoisePrior& prior, const LossConfig& cfg) {
  if (!(alpha >= 0.0)) throw ConfigError("abstention_wrap: alpha must be >= 0");
  if (base != LossKind::gce && base != LossKind::sce) throw ConfigError("abstention_wrap: base loss must be gce or sce");
  prior.validate();
  cfg.validate();
  auto parts = detail::split_abstain(probs, labels, "abstention_wrap");
  auto base_map = base == LossKind::gce ? detail::gce_map(parts.target, cfg.q)
                                        : detail::sce_map(parts.target, cfg.sce_alpha, cfg.sce_beta, cfg.rce_floor);
  auto first = ad::mul(parts.keep, base_map);
  // |log(1 - eta_tilde) - log(1 - p_{k+1})|
  auto penalty = ad::scale(ad::abs(ad::add_scalar(ad::scale(ad::log(parts.keep), -1.0), std::log(1.0 - prior.eta_tilde))), alpha);
  const auto rate = abstention_rate(probs.value());
  return {ad::reduce_mean(ad::add(first, penalty)), rate.soft, rate.hard};
}

/// Abstaining Dice segmenter. `abstain` holds one sigmoid output per (sample, class):
///   (1/k) sum_c mean_b[(1 - a_bc)] * SoftDice_c + alpha * (1/k) sum_c mean_b |log((1 - eta_c) / (1 - a_bc))|.
/// The segmentation probabilities are not renormalized by (1 - a_c).
inline LossOutput ads_loss(ad::Var probs, ad::Var abstain, const LabelMask& labels, double alpha,
                           const NoisePrior& prior, double eps) {
  if (!(alpha >= 0.0)) throw ConfigError("ads_loss: alpha must be >= 0");
  if (!(eps > 0.0)) throw ConfigError("ads_loss: eps must be > 0");
  prior.validate();
  const std::size_t k = detail::channels(probs, "ads_loss");
  const auto& as = abstain.shape();
  if (as.size() != 2) throw DimensionError("ads_loss", "abstain_rank", 2, as.size());
  if (as[0] != probs.shape()[0]) throw DimensionError("ads_loss", "batch", probs.shape()[0], as[0]);
  if (as[1] != k) throw DimensionError("ads_loss", "class", k, as[1]);
  std::vector<double> eta_c = prior.eta_c.empty() ? std::vector<double>(k, prior.eta_tilde) : prior.eta_c;
  if (eta_c.size() != k) throw DimensionError("ads_loss", "eta_c", k, eta_c.size());

  auto& tape = probs.tape();
  auto per_class = detail::dice_per_class(probs, labels, eps);
  auto keep = ad::clamp_min(ad::one_minus(abstain), kLogFloor);
  auto first = ad::reduce_mean(ad::mul(ad::batch_mean(keep), per_class));

  Tensor log_prior(Shape{as[0], k});
  for (std::size_t b = 0; b < as[0]; ++b)
    for (std::size_t c = 0; c < k; ++c) log_prior[b * k + c] = std::log(1.0 - eta_c[c]);
  auto penalty = ad::reduce_mean(ad::abs(ad::sub(tape.constant(std::move(log_prior)), ad::log(keep))));

  double soft = 0.0, hard = 0.0;
  for (double a : abstain.value().data()) {
    soft += a;
    hard += a > 0.5 ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(abstain.value().size());
  return {ad::add(first, ad::scale(penalty, alpha)), soft / n, hard / n};
}

// ---------------------------------------------------------------------------
// Training-time dispatch from network outputs.

/// Loss of `kind` from raw logits. Pixel-abstaining kinds expect [b, k+1, h, w] logits;
/// ADS expects [b, k, h, w] logits plus the [b, k] head output.
///
/// During warm-up the abstaining kinds train their base loss on the k class channels
/// only (softmax over the class logits equals the renormalized probabilities), with no
/// (1 - p_{k+1}) factor and no penalty, so nothing reaches the abstention channel or the
/// abstention head. The reported rates still describe the full output.
inline LossOutput segmentation_loss(const LossConfig& cfg, ad::Var logits, const ad::Var* abstain, const LabelMask& labels,
                                    double alpha, const NoisePrior& prior, bool warmup) {
  const auto mode = abstention_mode(cfg.kind);
  const std::size_t nc = detail::channels(logits, "segmentation_loss");
  if (mode == AbstentionMode::classwise && abstain == nullptr) throw ConfigError("ads requires the class-wise head output");

  auto base_loss = [&](LossKind base, ad::Var p) -> ad::Var {
    switch (base) {
      case LossKind::gce: return gce(p, labels, cfg.q);
      case LossKind::sce: return sce(p, labels, cfg.sce_alpha, cfg.sce_beta, cfg.rce_floor);
      case LossKind::dice: return dice(p, labels, cfg.dice_eps);
      default: return cross_entropy(p, labels);
    }
  };

  if (mode == AbstentionMode::none) {
    return {base_loss(cfg.kind, ad::softmax_channel(logits)), 0.0, 0.0};
  }

  if (mode == AbstentionMode::classwise) {
    auto probs = ad::softmax_channel(logits);
    if (warmup) {
      double soft = 0.0, hard = 0.0;
      for (double a : abstain->value().data()) {
        soft += a;
        hard += a > 0.5 ? 1.0 : 0.0;
      }
      const double n = static_cast<double>(abstain->value().size());
      return {dice(probs, labels, cfg.dice_eps), soft / n, hard / n};
    }
    return ads_loss(probs, *abstain, labels, alpha, prior, cfg.dice_eps);
  }

  if (warmup) {
    AbstentionRate rate;
    {
      ad::Tape scratch;
      rate = abstention_rate(ad::softmax_channel(scratch.constant(logits.value())).value());
    }
    const LossKind base = cfg.kind == LossKind::gac ? LossKind::gce : cfg.kind == LossKind::sac ? LossKind::sce : LossKind::ce;
    return {base_loss(base, ad::softmax_channel(ad::slice_channels(logits, 0, nc - 1))), rate.soft, rate.hard};
  }

  auto probs = ad::softmax_channel(logits);
  switch (cfg.kind) {
    case LossKind::dac: return dac_loss(probs, labels, alpha);
    case LossKind::idac: return idac_loss(probs, labels, alpha, prior);
    case LossKind::gac: return abstention_wrap(LossKind::gce, probs, labels, alpha, prior, cfg);
    default: return abstention_wrap(LossKind::sce, probs, labels, alpha, prior, cfg);
  }
}

}  // namespace abstain
