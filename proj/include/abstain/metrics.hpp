#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "abstain/error.hpp"
#include "abstain/tensor.hpp"

namespace abstain {

/// k x k pixel counts indexed (true class, predicted class).
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {}

  void accumulate(const LabelMask& predictions, const LabelMask& truth) {
    if (predictions.batch() != truth.batch()) throw DimensionError("accumulate", "batch", truth.batch(), predictions.batch());
    if (predictions.height() != truth.height()) throw DimensionError("accumulate", "height", truth.height(), predictions.height());
    if (predictions.width() != truth.width()) throw DimensionError("accumulate", "width", truth.width(), predictions.width());
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const auto t = truth[i], p = predictions[i];
      if (t >= k_ || p >= k_) throw RangeError("accumulate: class id outside [0," + std::to_string(k_) + ") at pixel " + std::to_string(i));
      ++counts_[t * k_ + p];
    }
  }

  void merge(const ConfusionAccumulator& other) {
    if (other.k_ != k_) throw DimensionError("merge", "num_classes", k_, other.k_);
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
  std::size_t num_classes() const noexcept { return k_; }
  std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

  friend bool operator==(const ConfusionAccumulator&, const ConfusionAccumulator&) = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

enum class AbsentClassPolicy {
  exclude,       // classes absent from truth and prediction are left out of the mean
  count_as_zero  // they contribute IoU 0
};

struct MiouResult {
  double miou = 0.0;
  std::vector<std::optional<double>> per_class_iou;  // nullopt for excluded classes
};

/// IoU_c = diag / (row + col - diag), pooled over every accumulated pixel.
inline MiouResult miou(const ConfusionAccumulator& acc, AbsentClassPolicy policy = AbsentClassPolicy::exclude) {
  const std::size_t k = acc.num_classes();
  if (acc.total() == 0) throw InsufficientDataError("miou: empty accumulator");
  MiouResult r;
  r.per_class_iou.resize(k);
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += acc.at(c, j);
      col += acc.at(j, c);
    }
    const auto diag = acc.at(c, c);
    const auto uni = row + col - diag;
    if (uni == 0) {
      if (policy == AbsentClassPolicy::count_as_zero) {
        r.per_class_iou[c] = 0.0;
        ++counted;
      }
      continue;
    }
    const double iou = static_cast<double>(diag) / static_cast<double>(uni);
    r.per_class_iou[c] = iou;
    sum += iou;
    ++counted;
  }
  if (counted == 0) throw InsufficientDataError("miou: undefined, no class present");
  r.miou = sum / static_cast<double>(counted);
  return r;
}

// Two-sided 95% Student-t quantiles t_{0.975, df} for df = 1..30.
inline constexpr double kStudentT975[30] = {
    12.706205, 4.302653, 3.182446, 2.776445, 2.570582, 2.446912, 2.364624, 2.306004, 2.262157, 2.228139,
    2.200985,  2.178813, 2.160369, 2.144787, 2.131450, 2.119905, 2.109816, 2.100922, 2.093024, 2.085963,
    2.079614,  2.073873, 2.068658, 2.063899, 2.059539, 2.055529, 2.051831, 2.048407, 2.045230, 2.042272};

inline double student_t975(std::size_t df) {
  if (df == 0) throw InsufficientDataError("student_t975: zero degrees of freedom");
  if (df <= 30) return kStudentT975[df - 1];
  // Cornish-Fisher expansion around the normal quantile; error < 1e-5 for df > 30.
  const double z = 1.959963984540054, v = static_cast<double>(df);
  const double z3 = z * z * z, z5 = z3 * z * z, z7 = z5 * z * z;
  return z + (z3 + z) / (4 * v) + (5 * z5 + 16 * z3 + 3 * z) / (96 * v * v) +
         (3 * z7 + 19 * z5 + 17 * z3 - 15 * z) / (384 * v * v * v);
}

struct MeanCI {
  double mean = 0.0;
  double half_width = 0.0;
};

/// mean +- t_{0.975, n-1} * s / sqrt(n), s the sample standard deviation.
inline MeanCI ci95(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 2) throw InsufficientDataError("ci95: need at least 2 values");
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double s = std::sqrt(ss / static_cast<double>(n - 1));
  return {mean, student_t975(n - 1) * s / std::sqrt(static_cast<double>(n))};
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) throw InsufficientDataError("mean_std: no values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

struct DropPoint {
  double eta_percent;  // noise rate in %
  double miou_points;  // mIoU in percentage points
};

struct DropRateResult {
  double slope = 0.0;      // mean drop rate over seeds: mIoU points lost per 1% noise
  double intercept = 0.0;  // mean fitted mIoU at zero noise
  std::vector<double> per_seed_slopes;
  double mean = 0.0;
  double half_width = std::numeric_limits<double>::quiet_NaN();  // NaN with a single seed
};

/// Per-seed ordinary least-squares slope of mIoU vs noise rate, negated so that a
/// degrading curve gives a positive drop rate; then mean and 95% t-interval over seeds.
inline DropRateResult drop_rate(const std::vector<std::vector<DropPoint>>& per_seed) {
  if (per_seed.empty()) throw InsufficientDataError("drop_rate: no seeds");
  DropRateResult r;
  double intercepts = 0.0;
  for (const auto& series : per_seed) {
    const std::size_t n = series.size();
    if (n < 2) throw InsufficientDataError("drop_rate: need at least 2 noise levels per seed");
    double mx = 0.0, my = 0.0;
    for (const auto& p : series) {
      mx += p.eta_percent;
      my += p.miou_points;
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0;
    for (const auto& p : series) {
      sxy += (p.eta_percent - mx) * (p.miou_points - my);
      sxx += (p.eta_percent - mx) * (p.eta_percent - mx);
    }
    if (sxx == 0.0) throw InsufficientDataError("drop_rate: need at least 2 distinct noise levels per seed");
    const double slope = sxy / sxx;
    r.per_seed_slopes.push_back(-slope);
    intercepts += my - slope * mx;
  }
  r.intercept = intercepts / static_cast<double>(per_seed.size());
  if (per_seed.size() >= 2) {
    const auto ci = ci95(r.per_seed_slopes);
    r.mean = ci.mean;
    r.half_width = ci.half_width;
  } else {
    r.mean = r.per_seed_slopes.front();
  }
  r.slope = r.mean;
  return r;
}

// ---------------------------------------------------------------------------
// Run telemetry

struct EpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_miou = 0.0;
  double abst_soft = 0.0;
  double abst_hard = 0.0;
  double alpha = 0.0;
  double lr = 0.0;
};

struct RunRecord {
  std::vector<EpochRow> rows;
  double test_miou = 0.0;
  std::uint64_t seed = 0;
  std::string loss;
  double eta = 0.0;
  bool failed = false;
  std::string failure;  // reason, with epoch/batch, when failed
};

inline constexpr const char* kRunCsvHeader = "epoch,train_loss,val_miou,abst_soft,abst_hard,alpha,lr";

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline void write_run_csv(std::ostream& os, const RunRecord& rec) {
  os << kRunCsvHeader << '\n';
  for (const auto& r : rec.rows) {
    os << r.epoch << ',' << format_real(r.train_loss) << ',' << format_real(r.val_miou) << ',' << format_real(r.abst_soft)
       << ',' << format_real(r.abst_hard) << ',' << format_real(r.alpha) << ',' << format_real(r.lr) << '\n';
  }
}

}  // namespace abstain
