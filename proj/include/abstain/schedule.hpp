#pragma once

// Abstention-penalty curricula. Epochs are 0-based; epochs [0, L) are abstention-free
// and both schedules return exactly 0 there.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "abstain/error.hpp"

namespace abstain {

/// Power-law ramp: alpha(e) = alpha_final * ((e - L) / (E - L))^gamma for e >= L.
struct AlphaSchedule {
  double alpha_final = 1.0;
  int warmup_epochs = 10;  // L
  int total_epochs = 50;   // E
  double gamma = 1.0;

  void validate() const {
    if (!(alpha_final >= 0.0)) throw ConfigError("schedule: alpha_final must be >= 0");
    if (warmup_epochs < 0) throw ConfigError("schedule: warmup must be >= 0");
    if (total_epochs <= warmup_epochs) throw ConfigError("schedule: epochs must exceed warmup");
    if (!(gamma > 0.0)) throw ConfigError("schedule: gamma must be > 0");
  }

  double alpha_at(int epoch) const {
    if (epoch < 0 || epoch > total_epochs) {
      throw RangeError("alpha_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(total_epochs) + "]");
    }
    if (epoch < warmup_epochs) return 0.0;
    const double x = static_cast<double>(epoch - warmup_epochs) / static_cast<double>(total_epochs - warmup_epochs);
    return alpha_final * std::pow(x, gamma);
  }
};

// Hyperparameters of the legacy linear schedule. mu and rho defaults are unvalidated
// guesses, not published values.
struct LegacyScheduleConfig {
  double alpha_final = 1.0;
  int warmup_epochs = 10;
  int total_epochs = 50;
  double mu = 0.05;   // moving-average momentum
  double rho = 64.0;  // initial-alpha divisor

  void validate() const {
    if (!(alpha_final >= 0.0)) throw ConfigError("legacy schedule: alpha_final must be >= 0");
    if (warmup_epochs < 0) throw ConfigError("legacy schedule: warmup must be >= 0");
    if (total_epochs <= warmup_epochs) throw ConfigError("legacy schedule: epochs must exceed warmup");
    if (!(mu > 0.0 && mu <= 1.0)) throw ConfigError("legacy schedule: mu must lie in (0, 1]");
    if (!(rho > 0.0)) throw ConfigError("legacy schedule: rho must be > 0");
  }

  double initial_alpha(double beta_ma) const { return beta_ma / rho; }
  double delta_alpha(double beta_ma) const {
    return (alpha_final - initial_alpha(beta_ma)) / static_cast<double>(total_epochs - warmup_epochs);
  }
};

/// Iteration-driven linear schedule: a moving average of the warm-up loss seeds alpha at
/// epoch L, after which alpha grows by a fixed step once per epoch.
class LegacyAlphaState {
 public:
  explicit LegacyAlphaState(LegacyScheduleConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  // One call per training iteration, in order. `p_abstain` is the batch's mean abstention
  // probability and `true_class_ce` the batch cross-entropy over the true classes.
  double step(int epoch, long iter, double p_abstain, double true_class_ce) {
    if (iter != last_iter_ + 1) {
      throw StateError("legacy schedule: iteration " + std::to_string(iter) + " after " + std::to_string(last_iter_));
    }
    if (epoch < last_epoch_) {
      throw StateError("legacy schedule: epoch " + std::to_string(epoch) + " after " + std::to_string(last_epoch_));
    }
    last_iter_ = iter;
    last_epoch_ = epoch;

    if (epoch < cfg_.warmup_epochs) {
      const double beta = (1.0 - p_abstain) * true_class_ce;
      if (iter == 0) beta_ma_ = beta;
      beta_ma_ = (1.0 - cfg_.mu) * beta_ma_ + cfg_.mu * beta;
    }
    if (epoch >= cfg_.warmup_epochs && !alpha_set_) {
      alpha_ = cfg_.initial_alpha(beta_ma_);
      delta_alpha_ = cfg_.delta_alpha(beta_ma_);
      update_epoch_ = cfg_.warmup_epochs;
      alpha_set_ = true;
    }
    if (alpha_set_ && epoch > update_epoch_) {
      alpha_ += delta_alpha_ * static_cast<double>(epoch - update_epoch_);
      update_epoch_ = epoch;
    }
    return current_alpha();
  }

  double current_alpha() const noexcept { return alpha_set_ ? alpha_ : 0.0; }
  double beta_ma() const noexcept { return beta_ma_; }
  double delta_alpha() const noexcept { return delta_alpha_; }
  bool alpha_set() const noexcept { return alpha_set_; }
  int update_epoch() const noexcept { return update_epoch_; }
  const LegacyScheduleConfig& config() const noexcept { return cfg_; }

 private:
  LegacyScheduleConfig cfg_;
  double beta_ma_ = 0.0;
  double alpha_ = 0.0;
  double delta_alpha_ = 0.0;
  bool alpha_set_ = false;
  int update_epoch_ = 0;
  int last_epoch_ = 0;
  long last_iter_ = -1;
};

struct AlphaPoint {
  int epoch;
  double alpha;
};

// (epoch, alpha) for epochs 0..E inclusive.
inline std::vector<AlphaPoint> preview(const AlphaSchedule& s) {
  s.validate();
  std::vector<AlphaPoint> out;
  for (int e = 0; e <= s.total_epochs; ++e) out.push_back({e, s.alpha_at(e)});
  return out;
}

// Legacy trajectory for a fixed warm-up moving average `beta_ma`.
inline std::vector<AlphaPoint> preview(const LegacyScheduleConfig& c, double beta_ma) {
  c.validate();
  std::vector<AlphaPoint> out;
  const double a0 = c.initial_alpha(beta_ma), d = c.delta_alpha(beta_ma);
  for (int e = 0; e <= c.total_epochs; ++e) {
    out.push_back({e, e < c.warmup_epochs ? 0.0 : a0 + static_cast<double>(e - c.warmup_epochs) * d});
  }
  return out;
}

}  // namespace abstain
