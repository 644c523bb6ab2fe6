#pragma once

// Sweep artifacts: per-cell CSVs, sweep_summary.json, curves.csv and an optional SVG chart.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "abstain/metrics.hpp"
#include "abstain/noise.hpp"
#include "abstain/trainer.hpp"

namespace abstain {

inline std::string cell_stem(LossKind k, double eta, std::uint64_t seed) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_eta%03ld_seed%llu", std::string(to_string(k)).c_str(), std::lround(eta * 100.0),
                static_cast<unsigned long long>(seed));
  return buf;
}

// JSON numbers are written through format_real so that reruns are byte-identical.
inline nlohmann::json real_json(double v) {
  if (!std::isfinite(v)) return nullptr;
  return nlohmann::json::parse(format_real(v));
}

inline nlohmann::json sweep_summary_json(const SweepResult& r) {
  nlohmann::json j;
  j["runs"] = nlohmann::json::array();
  for (const auto& c : r.cells) {
    nlohmann::json run{{"loss", to_string(c.kind)}, {"eta", real_json(c.eta)}, {"seed", c.seed}, {"failed", c.record.failed}};
    if (c.record.failed) run["failure"] = c.record.failure;
    else run["test_miou"] = real_json(c.record.test_miou);
    if (!c.record.rows.empty()) run["final_abst_hard"] = real_json(c.record.rows.back().abst_hard);
    j["runs"].push_back(run);
  }
  j["cells"] = nlohmann::json::array();
  for (const auto& s : r.summary) {
    j["cells"].push_back({{"loss", to_string(s.kind)},
                          {"eta", real_json(s.eta)},
                          {"runs", s.runs},
                          {"mean_miou", s.runs ? real_json(s.test_miou.mean) : nlohmann::json(nullptr)},
                          {"std_miou", s.runs ? real_json(s.test_miou.std) : nlohmann::json(nullptr)}});
  }
  j["drop_rates"] = nlohmann::json::object();
  for (const auto& [k, d] : r.drop_rates) {
    nlohmann::json slopes = nlohmann::json::array();
    for (double s : d.per_seed_slopes) slopes.push_back(real_json(s));
    j["drop_rates"][std::string(to_string(k))] = {{"slope", real_json(d.slope)},
                                                  {"intercept", real_json(d.intercept)},
                                                  {"per_seed_slopes", slopes},
                                                  {"mean", real_json(d.mean)},
                                                  {"ci95_half_width", real_json(d.half_width)}};
  }
  for (const auto& [k, msg] : r.drop_rate_errors) j["drop_rates"][std::string(to_string(k))] = {{"error", msg}};
  j["noise"] = nlohmann::json::array();
  for (const auto& [key, rep] : r.noise_reports) {
    auto n = to_json(rep);
    n["eta"] = real_json(key.first);
    n["seed"] = key.second;
    n["intensity"] = real_json(r.noise_specs.at(key.first).intensity.value_or(0.0));
    j["noise"].push_back(n);
  }
  j["failures"] = r.failures;
  return j;
}

inline void write_curves_csv(std::ostream& os, const SweepResult& r) {
  os << "loss,eta,mean_miou,std\n";
  for (const auto& s : r.summary) {
    os << to_string(s.kind) << ',' << format_real(s.eta) << ',';
    if (s.runs) os << format_real(s.test_miou.mean) << ',' << format_real(s.test_miou.std);
    else os << "nan,nan";
    os << '\n';
  }
}

/// Self-contained SVG polyline chart of mean test mIoU against eta, one line per loss.
inline std::string curves_svg(const SweepResult& r) {
  constexpr double W = 640, H = 400, L = 60, R = 140, T = 20, B = 50;
  std::vector<LossKind> kinds;
  double emax = 0.0, ymin = 1.0, ymax = 0.0;
  for (const auto& s : r.summary) {
    if (std::find(kinds.begin(), kinds.end(), s.kind) == kinds.end()) kinds.push_back(s.kind);
    emax = std::max(emax, s.eta);
    if (s.runs) {
      ymin = std::min(ymin, s.test_miou.mean);
      ymax = std::max(ymax, s.test_miou.mean);
    }
  }
  if (emax <= 0.0) emax = 1.0;
  if (ymax <= ymin) {
    ymin -= 0.05;
    ymax += 0.05;
  }
  const auto px = [&](double e) { return L + (W - L - R) * e / emax; };
  const auto py = [&](double m) { return T + (H - T - B) * (1.0 - (m - ymin) / (ymax - ymin)); };
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22"};
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << (W - R + L) / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\" font-size=\"12\">noise rate</text>\n";
  os << "<text x=\"15\" y=\"" << (H - B + T) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 15 " << (H - B + T) / 2
     << ")\" text-anchor=\"middle\">test mIoU</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double m = ymin + (ymax - ymin) * i / 4.0;
    os << "<text x=\"" << L - 5 << "\" y=\"" << py(m) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << m << "</text>\n";
    const double e = emax * i / 4.0;
    os << "<text x=\"" << px(e) << "\" y=\"" << H - B + 15 << "\" text-anchor=\"middle\" font-size=\"10\">" << e << "</text>\n";
  }
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    const char* color = colors[i % 9];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    bool first = true;
    for (const auto& s : r.summary) {
      if (s.kind != kinds[i] || !s.runs) continue;
      os << (first ? "" : " ") << px(s.eta) << ',' << py(s.test_miou.mean);
      first = false;
    }
    os << "\"/>\n";
    const double ly = T + 16.0 * static_cast<double>(i + 1);
    os << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly - 4 << "\" stroke=\""
       << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 35 << "\" y=\"" << ly << "\" font-size=\"12\">" << to_string(kinds[i]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Writes cells/<loss>_eta<pct>_seed<n>.csv, sweep_summary.json, curves.csv and,
/// when requested, curves.svg.
inline void write_sweep(const std::filesystem::path& dir, const SweepResult& r, bool svg) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "cells");
  for (const auto& c : r.cells) {
    std::ofstream os(dir / "cells" / (cell_stem(c.kind, c.eta, c.seed) + ".csv"));
    write_run_csv(os, c.record);
  }
  std::ofstream(dir / "sweep_summary.json") << sweep_summary_json(r).dump(2) << '\n';
  {
    std::ofstream os(dir / "curves.csv");
    write_curves_csv(os, r);
  }
  if (svg) std::ofstream(dir / "curves.svg") << curves_svg(r);
}

}  // namespace abstain
