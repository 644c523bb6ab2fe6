#pragma once

// Training engine: warm-up then abstention-phase training of the toy segmenter,
// per-epoch telemetry, and multi-seed noise sweeps.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "abstain/config.hpp"
#include "abstain/data.hpp"
#include "abstain/losses.hpp"
#include "abstain/metrics.hpp"
#include "abstain/model.hpp"
#include "abstain/noise.hpp"
#include "abstain/schedule.hpp"

namespace abstain {

// What the trainer saw on one minibatch, for instrumentation.
struct BatchEvent {
  int epoch;
  std::size_t batch;
  bool warmup;
  double alpha;
  const Tensor& logits;
  const Tensor& logits_grad;
  const Tensor* abstain;  // classwise head output, if any
  const LabelMask& labels;
  const LossOutput& loss;
};

using BatchObserver = std::function<void(const BatchEvent&)>;

struct RunSpec {
  LossKind kind = LossKind::ce;
  double eta = 0.0;
  std::uint64_t seed = 0;
  NoisePrior prior;
};

struct TrainResult {
  RunRecord record;
  Parameters params;
  std::optional<double> legacy_beta_ma;  // warm-up moving average, legacy schedules only
};

inline SegNetConfig model_config(const ExperimentConfig& cfg, LossKind kind) {
  SegNetConfig m;
  m.in_channels = cfg.scene.in_channels;
  m.hidden_channels = cfg.hidden_channels;
  m.num_classes = cfg.scene.num_classes;
  m.abstention_mode = abstention_mode(kind);
  m.pool_size = cfg.pool_size;
  m.image_height = cfg.scene.height;
  m.image_width = cfg.scene.width;
  m.input_shift = cfg.input_shift;
  return m;
}

/// Pooled-pixel mIoU of the k class channels against clean labels.
inline double evaluate_miou(const Parameters& params, const SegNetConfig& mcfg, const Dataset& data, std::size_t batch = 16) {
  ConfusionAccumulator acc(mcfg.num_classes);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
    const auto b = make_batch(data, idx, false);
    ad::Tape tape;
    const auto out = forward(tape, params, mcfg, b.images, false);
    acc.accumulate(predict_labels(out.logits.value(), mcfg.num_classes), b.labels);
  }
  return miou(acc).miou;
}

namespace detail {

// Batch mean abstention probability and cross-entropy of the renormalized true-class
// probability; inputs of the legacy schedule.
inline std::pair<double, double> legacy_batch_stats(const Tensor& logits, const LabelMask& labels) {
  ad::Tape scratch;
  const auto probs = ad::softmax_channel(scratch.constant(logits)).value();
  const std::size_t nb = probs.dim(0), nc = probs.dim(1), plane = probs.dim(2) * probs.dim(3);
  double pa = 0.0, ce = 0.0;
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      const double a = probs[(b * nc + nc - 1) * plane + i];
      const double keep = std::max(1.0 - a, kLogFloor);
      const double pt = probs[(b * nc + labels[b * plane + i]) * plane + i];
      pa += a;
      ce += -std::log(std::max(pt / keep, kLogFloor));
    }
  const double n = static_cast<double>(nb * plane);
  return {pa / n, ce / n};
}

}  // namespace detail

/// Trains one model. `splits.train` carries the (possibly noisy) training labels;
/// validation and test are always scored against clean labels. A non-finite loss aborts
/// the run and marks the record failed.
inline TrainResult train_one(const ExperimentConfig& cfg, const RunSpec& run, const Splits& splits,
                             const BatchObserver& observer = {}) {
  cfg.validate();
  LossConfig lcfg = cfg.loss;
  lcfg.kind = run.kind;
  const auto mcfg = model_config(cfg, run.kind);
  const int warmup = is_abstaining(run.kind) ? cfg.warmup_for(run.kind) : 0;
  const bool legacy = is_abstaining(run.kind) && cfg.schedules.at(run.kind).kind == ScheduleKind::legacy && warmup < cfg.epochs;

  TrainResult result;
  auto& rec = result.record;
  rec.seed = run.seed;
  rec.loss = std::string(to_string(run.kind));
  rec.eta = run.eta;
  result.params = init_params(mcfg, run.seed);

  OptimizerState opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  std::optional<LegacyAlphaState> legacy_state;
  if (legacy) legacy_state.emplace(cfg.legacy_config(run.kind));

  const auto& train = splits.train;
  std::vector<std::size_t> order(train.size());
  long iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool in_warmup = epoch < warmup;
    opt.lr = lr_at(epoch, cfg.lr);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(run.seed, 0x5348554646ULL + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    EpochRow row;
    row.epoch = epoch;
    row.lr = opt.lr;
    row.alpha = legacy ? 0.0 : cfg.alpha_for(run.kind, epoch);
    double loss_sum = 0.0, soft_sum = 0.0, hard_sum = 0.0;
    std::size_t nbatches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const auto batch = make_batch(train, std::span<const std::size_t>(order.data() + start, end - start), true);
      ad::Tape tape;
      auto out = forward(tape, result.params, mcfg, batch.images);
      double alpha = row.alpha;
      if (legacy) {
        const auto [pa, ce] = detail::legacy_batch_stats(out.logits.value(), batch.labels);
        alpha = legacy_state->step(epoch, iter, pa, ce);
        if (start == 0) row.alpha = alpha;
      }
      ++iter;
      const auto loss = segmentation_loss(lcfg, out.logits, out.abstain ? &*out.abstain : nullptr, batch.labels, alpha,
                                          run.prior, in_warmup);
      const double value = loss.scalar();
      if (!std::isfinite(value)) {
        rec.failed = true;
        rec.failure = "non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(nbatches);
        return result;
      }
      tape.backward(loss.value);
      if (observer) {
        observer(BatchEvent{epoch, nbatches, in_warmup, alpha, out.logits.value(), out.logits.grad(),
                            out.abstain ? &out.abstain->value() : nullptr, batch.labels, loss});
      }
      std::vector<Tensor> grads;
      grads.reserve(out.params.size());
      for (const auto& p : out.params) grads.push_back(p.grad());
      try {
        adamw_step(opt, result.params, grads);
      } catch (const NumericError& e) {
        rec.failed = true;
        rec.failure = std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " + std::to_string(nbatches);
        return result;
      }
      loss_sum += value;
      soft_sum += loss.abstention_rate_soft;
      hard_sum += loss.abstention_rate_hard;
      ++nbatches;
    }
    row.train_loss = loss_sum / static_cast<double>(nbatches);
    row.abst_soft = soft_sum / static_cast<double>(nbatches);
    row.abst_hard = hard_sum / static_cast<double>(nbatches);
    row.val_miou = evaluate_miou(result.params, mcfg, splits.val);
    rec.rows.push_back(row);
  }
  rec.test_miou = evaluate_miou(result.params, mcfg, splits.test);
  if (legacy) result.legacy_beta_ma = legacy_state->beta_ma();
  return result;
}

// ---------------------------------------------------------------------------
// Data preparation shared by single runs and sweeps

/// Clean dataset split into train/val/test by the configured sizes.
inline Splits make_splits(const ExperimentConfig& cfg) {
  const std::size_t n = cfg.n_train + cfg.n_val + cfg.n_test;
  const auto data = generate_dataset(cfg.scene, n, cfg.data_seed);
  const double dn = static_cast<double>(n);
  auto s = split(data, {static_cast<double>(cfg.n_train) / dn, static_cast<double>(cfg.n_val) / dn,
                        static_cast<double>(cfg.n_test) / dn},
                 derive_seed(cfg.data_seed, 0x53504C4954ULL));
  return s;
}

inline std::vector<LabelMask> clean_masks(const Dataset& d) {
  std::vector<LabelMask> m;
  m.reserve(d.size());
  for (const auto& s : d) m.push_back(s.clean_labels);
  return m;
}

// Noise stream for (eta, seed); independent of the loss under test.
inline std::uint64_t noise_seed(double eta, std::uint64_t seed) {
  return derive_seed(derive_seed(seed, 0x4E4F495345ULL), static_cast<std::uint64_t>(std::llround(eta * 1e6)));
}

struct NoisyTrain {
  Splits splits;
  CorruptionReport report;
};

/// Attaches noisy labels to the training split using a calibrated spec.
inline NoisyTrain attach_noise(const Splits& clean, const NoiseSpec& spec, double eta, std::uint64_t seed) {
  NoisyTrain nt{clean, {}};
  const auto masks = clean_masks(clean.train);
  auto corrupted = inject_all(masks, spec, noise_seed(eta, seed));
  for (std::size_t i = 0; i < nt.splits.train.size(); ++i) nt.splits.train[i].noisy_labels = std::move(corrupted.masks[i]);
  nt.report = corrupted.pooled;
  return nt;
}

/// eta_tilde defaults to the injected eta; eta_c to the measured per-class rates.
inline NoisePrior resolve_prior(const ExperimentConfig& cfg, double eta, const CorruptionReport& report) {
  NoisePrior p;
  p.eta_tilde = cfg.eta_tilde.value_or(eta);
  if (cfg.eta_c) {
    p.eta_c = *cfg.eta_c;
  } else if (!report.per_class_eta.empty()) {
    p.eta_c = report.per_class_eta;
    for (auto& e : p.eta_c) e = std::min(e, 0.99);
  } else {
    p.eta_c.assign(cfg.scene.num_classes, p.eta_tilde);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Sweeps

struct CellResult {
  LossKind kind;
  double eta;
  std::uint64_t seed;
  RunRecord record;
};

struct CellSummary {
  LossKind kind;
  double eta;
  MeanStd test_miou;  // over successful seeds
  std::size_t runs = 0;
};

struct SweepResult {
  std::vector<CellResult> cells;  // ordered (loss, eta, seed)
  std::vector<CellSummary> summary;
  std::map<LossKind, DropRateResult> drop_rates;
  std::map<LossKind, std::string> drop_rate_errors;
  std::vector<std::string> failures;
  std::map<double, NoiseSpec> noise_specs;
  std::map<std::pair<double, std::uint64_t>, CorruptionReport> noise_reports;
};

/// Runs every (loss, eta, seed) cell. Noise is calibrated once per eta on the clean
/// training masks and injected once per (eta, seed), shared by all losses. Cells run on
/// `jobs` worker threads; results do not depend on the job count.
inline SweepResult sweep(const ExperimentConfig& cfg, const std::vector<LossKind>& losses, const std::vector<double>& etas,
                         const std::vector<std::uint64_t>& seeds, unsigned jobs = 1) {
  cfg.validate();
  if (losses.empty() || etas.empty() || seeds.empty()) throw ConfigError("sweep: losses, etas and seeds must be nonempty");
  const auto clean = make_splits(cfg);
  const auto masks = clean_masks(clean.train);

  SweepResult res;
  for (double eta : etas) res.noise_specs[eta] = calibrate(masks, cfg.noise_spec(eta), cfg.calibration_seed);

  std::map<std::pair<double, std::uint64_t>, NoisyTrain> noisy;
  for (double eta : etas)
    for (auto seed : seeds) {
      auto nt = attach_noise(clean, res.noise_specs[eta], eta, seed);
      res.noise_reports[{eta, seed}] = nt.report;
      noisy.emplace(std::make_pair(eta, seed), std::move(nt));
    }

  for (auto k : losses)
    for (double eta : etas)
      for (auto seed : seeds) res.cells.push_back(CellResult{k, eta, seed, {}});

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < res.cells.size(); i = next++) {
      auto& cell = res.cells[i];
      const auto& nt = noisy.at({cell.eta, cell.seed});
      RunSpec run{cell.kind, cell.eta, cell.seed, resolve_prior(cfg, cell.eta, nt.report)};
      try {
        cell.record = train_one(cfg, run, nt.splits).record;
      } catch (const Error& e) {
        cell.record.failed = true;
        cell.record.failure = e.what();
        cell.record.loss = std::string(to_string(cell.kind));
        cell.record.eta = cell.eta;
        cell.record.seed = cell.seed;
      }
    }
  };
  jobs = std::max(1u, jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (const auto& c : res.cells)
    if (c.record.failed) {
      res.failures.push_back(std::string(to_string(c.kind)) + " eta=" + format_real(c.eta) + " seed=" + std::to_string(c.seed) +
                             ": " + c.record.failure);
    }

  for (auto k : losses) {
    std::map<std::uint64_t, std::vector<DropPoint>> per_seed;
    for (double eta : etas) {
      std::vector<double> vals;
      for (const auto& c : res.cells)
        if (c.kind == k && c.eta == eta && !c.record.failed) {
          vals.push_back(c.record.test_miou);
          per_seed[c.seed].push_back({eta * 100.0, c.record.test_miou * 100.0});
        }
      CellSummary s{k, eta, {}, vals.size()};
      if (!vals.empty()) s.test_miou = mean_std(vals);
      res.summary.push_back(s);
    }
    std::vector<std::vector<DropPoint>> series;
    for (auto& [seed, pts] : per_seed) series.push_back(std::move(pts));
    try {
      res.drop_rates[k] = drop_rate(series);
    } catch (const InsufficientDataError& e) {
      res.drop_rate_errors[k] = e.what();
    }
  }
  return res;
}

}  // namespace abstain
