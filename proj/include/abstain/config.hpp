#pragma once

// Experiment configuration and its flat key=value file format:
//
//   # comment
//   loss.kind = gac
//   schedule.warmup = 8
//   gac.gamma = 3
//
// A JSON document is accepted as well; nested objects flatten to dotted keys.

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "abstain/data.hpp"
#include "abstain/error.hpp"
#include "abstain/losses.hpp"
#include "abstain/noise.hpp"
#include "abstain/schedule.hpp"

namespace abstain {

enum class ScheduleKind { power, legacy, fixed };

// Penalty curriculum of one abstaining loss.
struct PenaltySchedule {
  ScheduleKind kind = ScheduleKind::power;
  double alpha_final = 1.0;  // target (power / legacy) or the constant (fixed)
  double gamma = 1.0;
  std::optional<int> warmup;  // defaults to ExperimentConfig::warmup
};

struct ExperimentConfig {
  LossConfig loss;  // loss.kind selects the loss for single runs

  // Per-loss curricula. Defaults follow the published CaDIS settings; warm-up length is
  // shared (schedule.warmup) unless overridden per loss.
  std::map<LossKind, PenaltySchedule> schedules = {
      {LossKind::dac, {ScheduleKind::legacy, 1.0, 1.0, std::nullopt}},
      {LossKind::idac, {ScheduleKind::fixed, 1.0, 1.0, std::nullopt}},
      {LossKind::gac, {ScheduleKind::power, 3.0, 3.0, std::nullopt}},
      {LossKind::sac, {ScheduleKind::power, 1.0, 1.5, std::nullopt}},
      {LossKind::ads, {ScheduleKind::power, 1.0, 3.0, std::nullopt}},
  };
  double legacy_mu = 0.05;
  double legacy_rho = 64.0;

  // Prior: eta_tilde defaults to the injected eta, eta_c to the measured per-class rates.
  std::optional<double> eta_tilde;
  std::optional<std::vector<double>> eta_c;

  int epochs = 30;
  int warmup = 8;
  std::size_t batch_size = 8;
  double lr = 0.003;
  double weight_decay = 0.01;
  std::size_t hidden_channels = 16;
  std::size_t pool_size = 16;
  double input_shift = 0.5;

  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::vector<double> etas = {0.0, 0.05, 0.15, 0.25};
  double eta = 0.0;  // single-run noise level

  SceneSpec scene;
  std::size_t n_train = 400;
  std::size_t n_val = 50;
  std::size_t n_test = 50;
  std::uint64_t data_seed = 0;

  double structural_fraction = 0.5;
  std::size_t max_radius = 6;
  std::uint64_t calibration_seed = 12345;

  int warmup_for(LossKind k) const {
    auto it = schedules.find(k);
    return it != schedules.end() && it->second.warmup ? *it->second.warmup : warmup;
  }

  // Penalty weight for `k` at `epoch` from the closed-form schedules; legacy schedules
  // are data-driven and resolved by the trainer.
  double alpha_for(LossKind k, int epoch) const {
    if (!is_abstaining(k)) return 0.0;
    const auto& s = schedules.at(k);
    const int l = warmup_for(k);
    if (epoch < l) return 0.0;
    if (s.kind == ScheduleKind::fixed) return s.alpha_final;
    return AlphaSchedule{s.alpha_final, l, epochs, s.gamma}.alpha_at(epoch);
  }

  LegacyScheduleConfig legacy_config(LossKind k) const {
    const auto& s = schedules.at(k);
    return {s.alpha_final, warmup_for(k), epochs, legacy_mu, legacy_rho};
  }

  NoiseSpec noise_spec(double target) const {
    NoiseSpec n;
    n.target_eta = target;
    n.structural_fraction = structural_fraction;
    n.max_radius = max_radius;
    n.num_classes = scene.num_classes;
    return n;
  }

  void validate() const {
    loss.validate();
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (warmup < 0) throw ConfigError("schedule.warmup must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (seeds.empty()) throw ConfigError("train.seeds must not be empty");
    if (n_train < 1 || n_val < 1 || n_test < 1) throw ConfigError("data split sizes must be >= 1");
    scene.validate();
    for (const auto& [k, s] : schedules) {
      const int l = warmup_for(k);
      if (l >= epochs && is_abstaining(k)) {
        // Warm-up longer than training is allowed: the run is simply abstention-free.
        continue;
      }
      if (s.kind == ScheduleKind::power) AlphaSchedule{s.alpha_final, l, epochs, s.gamma}.validate();
      if (s.kind == ScheduleKind::legacy) legacy_config(k).validate();
      if (!(s.alpha_final >= 0.0)) throw ConfigError(std::string(to_string(k)) + ".alpha_final must be >= 0");
    }
    if (eta_tilde && !(*eta_tilde >= 0.0 && *eta_tilde < 1.0)) throw ConfigError("prior.eta_tilde must lie in [0, 1)");
    if (eta_c) NoisePrior{0.0, *eta_c}.validate(scene.num_classes);
    noise_spec(eta).validate();
    for (double e : etas) noise_spec(e).validate();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

inline std::size_t to_count(const std::string& key, const std::string& v) {
  const auto i = to_int(key, v);
  if (i < 0) throw ConfigError(key + ": must be >= 0");
  return static_cast<std::size_t>(i);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline void flatten_json(const nlohmann::json& j, const std::string& prefix, std::map<std::string, std::string>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto key = prefix.empty() ? it.key() : prefix + "." + it.key();
    const auto& v = it.value();
    if (v.is_object()) {
      flatten_json(v, key, out);
    } else if (v.is_array()) {
      std::string s;
      for (const auto& e : v) {
        if (!s.empty()) s += ",";
        s += e.is_string() ? e.get<std::string>() : e.dump();
      }
      out[key] = s;
    } else {
      out[key] = v.is_string() ? v.get<std::string>() : v.dump();
    }
  }
}

}  // namespace detail

/// Applies one key to `cfg`. Unknown keys and malformed values raise ConfigError naming the key.
inline void apply_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& raw) {
  using namespace detail;
  const std::string v = trim(raw);
  if (key == "loss.kind") cfg.loss.kind = parse_loss_kind(v);
  else if (key == "loss.q") cfg.loss.q = to_real(key, v);
  else if (key == "loss.sce_alpha") cfg.loss.sce_alpha = to_real(key, v);
  else if (key == "loss.sce_beta") cfg.loss.sce_beta = to_real(key, v);
  else if (key == "loss.dice_eps") cfg.loss.dice_eps = to_real(key, v);
  else if (key == "loss.rce_floor") cfg.loss.rce_floor = to_real(key, v);
  else if (key == "prior.eta_tilde") cfg.eta_tilde = v == "auto" ? std::nullopt : std::optional<double>(to_real(key, v));
  else if (key == "prior.eta_c") {
    if (v == "auto") cfg.eta_c.reset();
    else {
      std::vector<double> e;
      for (const auto& s : split_list(v)) e.push_back(to_real(key, s));
      cfg.eta_c = e;
    }
  } else if (key == "schedule.warmup") cfg.warmup = static_cast<int>(to_int(key, v));
  else if (key == "schedule.mu" || key == "legacy.mu") cfg.legacy_mu = to_real(key, v);
  else if (key == "schedule.rho" || key == "legacy.rho") cfg.legacy_rho = to_real(key, v);
  else if (key == "train.epochs") cfg.epochs = static_cast<int>(to_int(key, v));
  else if (key == "train.batch_size") cfg.batch_size = to_count(key, v);
  else if (key == "train.lr") cfg.lr = to_real(key, v);
  else if (key == "train.weight_decay") cfg.weight_decay = to_real(key, v);
  else if (key == "train.seeds") {
    cfg.seeds.clear();
    for (const auto& s : split_list(v)) cfg.seeds.push_back(to_count(key, s));
  } else if (key == "train.etas") {
    cfg.etas.clear();
    for (const auto& s : split_list(v)) cfg.etas.push_back(to_real(key, s));
  } else if (key == "train.eta" || key == "noise.eta") cfg.eta = to_real(key, v);
  else if (key == "model.hidden") cfg.hidden_channels = to_count(key, v);
  else if (key == "model.pool_size") cfg.pool_size = to_count(key, v);
  else if (key == "model.input_shift") cfg.input_shift = to_real(key, v);
  else if (key == "data.height") cfg.scene.height = to_count(key, v);
  else if (key == "data.width") cfg.scene.width = to_count(key, v);
  else if (key == "data.num_classes") cfg.scene.num_classes = to_count(key, v);
  else if (key == "data.in_channels") cfg.scene.in_channels = to_count(key, v);
  else if (key == "data.min_shapes") cfg.scene.min_shapes = to_count(key, v);
  else if (key == "data.max_shapes") cfg.scene.max_shapes = to_count(key, v);
  else if (key == "data.min_extent") cfg.scene.min_extent = to_real(key, v);
  else if (key == "data.max_extent") cfg.scene.max_extent = to_real(key, v);
  else if (key == "data.sigma") cfg.scene.sigma = to_real(key, v);
  else if (key == "data.disks") cfg.scene.disks = to_bool(key, v);
  else if (key == "data.rectangles") cfg.scene.rectangles = to_bool(key, v);
  else if (key == "data.train") cfg.n_train = to_count(key, v);
  else if (key == "data.val") cfg.n_val = to_count(key, v);
  else if (key == "data.test") cfg.n_test = to_count(key, v);
  else if (key == "data.seed") cfg.data_seed = to_count(key, v);
  else if (key == "noise.structural_fraction") cfg.structural_fraction = to_real(key, v);
  else if (key == "noise.max_radius") cfg.max_radius = to_count(key, v);
  else if (key == "noise.calibration_seed") cfg.calibration_seed = to_count(key, v);
  else {
    // Per-loss curriculum keys: <loss>.{schedule, alpha_final, alpha, gamma, warmup}.
    const auto dot = key.find('.');
    if (dot == std::string::npos) throw ConfigError("unknown config key '" + key + "'");
    LossKind k;
    try {
      k = parse_loss_kind(key.substr(0, dot));
    } catch (const ConfigError&) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    if (!is_abstaining(k)) throw ConfigError("unknown config key '" + key + "' (" + std::string(to_string(k)) + " has no penalty schedule)");
    auto& s = cfg.schedules[k];
    const auto field = key.substr(dot + 1);
    if (field == "schedule") {
      if (v == "power") s.kind = ScheduleKind::power;
      else if (v == "legacy") s.kind = ScheduleKind::legacy;
      else if (v == "fixed") s.kind = ScheduleKind::fixed;
      else throw ConfigError(key + ": expected power, legacy or fixed");
    } else if (field == "alpha_final" || field == "alpha") s.alpha_final = to_real(key, v);
    else if (field == "gamma") s.gamma = to_real(key, v);
    else if (field == "warmup") s.warmup = static_cast<int>(to_int(key, v));
    else throw ConfigError("unknown config key '" + key + "'");
  }
}

inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig cfg = {}) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    std::map<std::string, std::string> flat;
    detail::flatten_json(j, "", flat);
    for (const auto& [k, v] : flat) apply_config_key(cfg, k, v);
    return cfg;
  }
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    apply_config_key(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

}  // namespace abstain
