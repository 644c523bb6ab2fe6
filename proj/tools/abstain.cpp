// abstain: command-line front end for training, sweeps, noise injection, schedule
// previews, gradient checks and report generation.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "abstain.hpp"

namespace fs = std::filesystem;
using namespace abstain;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log_line(const std::string& s) { std::cerr << s << '\n'; }

ExperimentConfig load(const std::string& path) {
  auto cfg = load_config(path);
  cfg.validate();
  return cfg;
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(2) << '\n'; }

std::vector<LossKind> parse_losses(const std::vector<std::string>& names) {
  std::vector<LossKind> out;
  for (const auto& n : names) {
    if (n == "all") {
      out.insert(out.end(), kAllLosses.begin(), kAllLosses.end());
    } else {
      out.push_back(parse_loss_kind(n));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_train(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out,
              const std::optional<std::string>& loss, std::optional<double> eta) {
  auto cfg = load(config);
  if (loss) cfg.loss.kind = parse_loss_kind(*loss);
  if (eta) cfg.eta = *eta;
  cfg.validate();
  const std::uint64_t s = seed.value_or(cfg.seeds.front());

  const auto clean = make_splits(cfg);
  const auto masks = clean_masks(clean.train);
  const auto spec = calibrate(masks, cfg.noise_spec(cfg.eta), cfg.calibration_seed);
  const auto noisy = attach_noise(clean, spec, cfg.eta, s);
  const RunSpec run{cfg.loss.kind, cfg.eta, s, resolve_prior(cfg, cfg.eta, noisy.report)};
  log_line("train: loss=" + std::string(to_string(run.kind)) + " eta=" + format_real(cfg.eta) + " seed=" + std::to_string(s) +
           " achieved_eta=" + format_real(noisy.report.achieved_eta));

  const auto result = train_one(cfg, run, noisy.splits, {});
  fs::create_directories(out);
  {
    std::ofstream os(fs::path(out) / "run.csv");
    write_run_csv(os, result.record);
  }
  nlohmann::json j{{"loss", to_string(run.kind)},
                   {"eta", real_json(cfg.eta)},
                   {"seed", s},
                   {"failed", result.record.failed},
                   {"epochs", result.record.rows.size()},
                   {"eta_tilde", real_json(run.prior.eta_tilde)},
                   {"noise", to_json(noisy.report)}};
  if (result.record.failed) {
    j["failure"] = result.record.failure;
  } else {
    j["test_miou"] = real_json(result.record.test_miou);
  }
  if (!result.record.rows.empty()) {
    j["final_abst_soft"] = real_json(result.record.rows.back().abst_soft);
    j["final_abst_hard"] = real_json(result.record.rows.back().abst_hard);
  }
  if (result.legacy_beta_ma) j["legacy_beta_ma"] = real_json(*result.legacy_beta_ma);
  write_json(fs::path(out) / "summary.json", j);
  save_checkpoint(result.params, (fs::path(out) / "checkpoint.bin").string());
  if (result.record.failed) {
    log_line("train: run failed: " + result.record.failure);
    return 2;
  }
  log_line("train: test mIoU " + format_real(result.record.test_miou));
  return 0;
}

int cmd_sweep(const std::string& config, const std::vector<std::string>& losses, const std::vector<double>& etas,
              const std::vector<std::uint64_t>& seeds, const std::string& out, unsigned jobs, bool svg) {
  auto cfg = load(config);
  const auto kinds = losses.empty() ? std::vector<LossKind>(kAllLosses.begin(), kAllLosses.end()) : parse_losses(losses);
  const auto& e = etas.empty() ? cfg.etas : etas;
  const auto& s = seeds.empty() ? cfg.seeds : seeds;
  for (double eta : e) cfg.noise_spec(eta).validate();
  log_line("sweep: " + std::to_string(kinds.size() * e.size() * s.size()) + " runs on " + std::to_string(jobs) + " job(s)");
  const auto result = sweep(cfg, kinds, e, s, jobs);
  write_sweep(out, result, svg);
  for (const auto& f : result.failures) log_line("sweep: failed " + f);
  if (result.failures.size() == result.cells.size()) return 2;
  return 0;
}

int cmd_inject_noise(const std::string& masks_dir, double eta, std::uint64_t seed, const std::string& out, std::size_t k,
                     double structural_fraction, std::size_t max_radius) {
  if (!fs::is_directory(masks_dir)) throw ConfigError("--masks: not a directory: " + masks_dir);
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(masks_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".pgm") paths.push_back(entry.path());
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw ConfigError("--masks: no .pgm masks in " + masks_dir);
  std::vector<LabelMask> masks;
  for (const auto& p : paths) {
    auto m = pnm::read_mask(p.string());
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i] >= k) throw FormatError(p.string(), "class id " + std::to_string(m[i]) + " >= --classes " + std::to_string(k));
    masks.push_back(std::move(m));
  }
  NoiseSpec spec;
  spec.target_eta = eta;
  spec.num_classes = k;
  spec.structural_fraction = structural_fraction;
  spec.max_radius = max_radius;
  spec.validate();
  spec = calibrate(masks, spec, seed);
  const auto corrupted = inject_all(masks, spec, seed);
  fs::create_directories(fs::path(out) / "masks");
  for (std::size_t i = 0; i < paths.size(); ++i) pnm::write_mask((fs::path(out) / "masks" / paths[i].filename()).string(), corrupted.masks[i]);
  auto j = to_json(corrupted.pooled);
  j["target_eta"] = real_json(eta);
  j["intensity"] = real_json(spec.intensity.value_or(0.0));
  j["seed"] = seed;
  j["masks"] = paths.size();
  write_json(fs::path(out) / "report.json", j);
  log_line("inject-noise: achieved eta " + format_real(corrupted.pooled.achieved_eta));
  return 0;
}

int cmd_schedule_preview(double alpha_final, double gamma, int warmup, int epochs, bool legacy, double rho, double mu,
                         std::optional<double> beta, const std::optional<std::string>& out) {
  std::vector<AlphaPoint> points;
  if (legacy) {
    if (!beta) throw UsageError("--legacy requires --beta");
    points = preview(LegacyScheduleConfig{alpha_final, warmup, epochs, mu, rho}, *beta);
  } else {
    points = preview(AlphaSchedule{alpha_final, warmup, epochs, gamma});
  }
  std::ofstream file;
  if (out) file.open(*out);
  std::ostream& os = out ? file : std::cout;
  os << "epoch,alpha\n";
  for (const auto& p : points) os << p.epoch << ',' << format_real(p.alpha) << '\n';
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t seeds, double tolerance) {
  const auto results = run_gradient_suite(seed, seeds);
  // One line per case: worst error over seeds.
  std::vector<std::pair<std::string, double>> worst;
  for (const auto& r : results) {
    if (worst.empty() || worst.back().first != r.name) worst.emplace_back(r.name, 0.0);
    worst.back().second = std::max(worst.back().second, r.max_rel_error);
  }
  bool ok = true;
  std::printf("%-26s %-12s %s\n", "case", "max_rel_err", "status");
  for (const auto& [name, err] : worst) {
    const bool pass = err < tolerance;
    ok = ok && pass;
    std::printf("%-26s %-12.3e %s\n", name.c_str(), err, pass ? "PASS" : "FAIL");
  }
  std::printf("%zu cases x %zu seeds: %s\n", worst.size(), seeds, ok ? "all passed" : "FAILURES");
  return ok ? 0 : 2;
}

// Rebuilds curves.csv (and optionally curves.svg) from a sweep directory.
int cmd_report(const std::string& in, const std::optional<std::string>& out, bool svg) {
  const auto path = fs::path(in) / "sweep_summary.json";
  std::ifstream is(path);
  if (!is) throw ConfigError("--in: cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string(), e.what());
  }
  SweepResult r;
  for (const auto& c : j.at("cells")) {
    CellSummary s{parse_loss_kind(c.at("loss").get<std::string>()), c.at("eta").get<double>(), {}, c.at("runs").get<std::size_t>()};
    if (s.runs) s.test_miou = {c.at("mean_miou").get<double>(), c.at("std_miou").get<double>()};
    r.summary.push_back(s);
  }
  const fs::path dst = out ? fs::path(*out) : fs::path(in);
  fs::create_directories(dst);
  {
    std::ofstream os(dst / "curves.csv");
    write_curves_csv(os, r);
  }
  if (svg) std::ofstream(dst / "curves.svg") << curves_svg(r);
  for (const auto& [name, d] : j.at("drop_rates").items()) {
    if (d.contains("error")) {
      std::printf("%-6s drop rate: %s\n", name.c_str(), d.at("error").get<std::string>().c_str());
    } else if (d.at("ci95_half_width").is_null()) {
      std::printf("%-6s drop rate: %.4f\n", name.c_str(), d.at("mean").get<double>());
    } else {
      std::printf("%-6s drop rate: %.4f +- %.4f\n", name.c_str(), d.at("mean").get<double>(),
                  d.at("ci95_half_width").get<double>());
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Abstention losses for noisy-label segmentation"};
  app.require_subcommand(1);

  std::string config, out;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::string> loss;
  std::optional<double> train_eta;
  auto* train = app.add_subcommand("train", "Train one model and write run.csv, summary.json, checkpoint.bin");
  train->add_option("--config", config, "Config file")->required();
  train->add_option("--seed", train_seed, "Run seed (default: first configured seed)");
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--loss", loss, "Override loss.kind");
  train->add_option("--eta", train_eta, "Override the injected noise rate");

  std::vector<std::string> losses;
  std::vector<double> etas;
  std::vector<std::uint64_t> seeds;
  unsigned jobs = 1;
  bool svg = false;
  auto* sw = app.add_subcommand("sweep", "Run a loss x eta x seed grid");
  sw->add_option("--config", config, "Config file")->required();
  sw->add_option("--losses", losses, "Comma-separated losses, or all")->delimiter(',');
  sw->add_option("--etas", etas, "Comma-separated noise rates")->delimiter(',');
  sw->add_option("--seeds", seeds, "Comma-separated seeds")->delimiter(',');
  sw->add_option("--out", out, "Output directory")->required();
  sw->add_option("--jobs", jobs, "Worker threads")->check(CLI::Range(1u, 256u));
  sw->add_flag("--svg", svg, "Also write curves.svg");

  std::string masks_dir;
  double eta = 0.0;
  std::uint64_t noise_seed_value = 0;
  std::size_t classes = 4, max_radius = 6;
  double structural_fraction = 0.5;
  auto* inj = app.add_subcommand("inject-noise", "Calibrate and corrupt a directory of PGM masks");
  inj->add_option("--masks", masks_dir, "Directory of .pgm masks")->required();
  inj->add_option("--eta", eta, "Target noise rate")->required();
  inj->add_option("--seed", noise_seed_value, "Noise seed")->required();
  inj->add_option("--out", out, "Output directory")->required();
  inj->add_option("--classes", classes, "Number of classes k");
  inj->add_option("--structural-fraction", structural_fraction, "Share of intensity driving morphology");
  inj->add_option("--max-radius", max_radius, "Largest morphology radius");

  double alpha_final = 1.0, gamma = 1.0, rho = 64.0, mu = 0.05;
  int warmup = 0, epochs = 0;
  bool legacy = false;
  std::optional<double> beta;
  std::optional<std::string> preview_out;
  auto* prev = app.add_subcommand("schedule-preview", "Print the alpha schedule as CSV (epoch, alpha)");
  prev->add_option("--alpha-final", alpha_final, "Final penalty weight");
  prev->add_option("--gamma", gamma, "Power-law exponent");
  prev->add_option("--warmup", warmup, "Abstention-free epochs L")->required();
  prev->add_option("--epochs", epochs, "Total epochs E")->required();
  prev->add_flag("--legacy", legacy, "Use the legacy linear schedule");
  prev->add_option("--rho", rho, "Legacy initial-alpha divisor");
  prev->add_option("--mu", mu, "Legacy moving-average rate");
  prev->add_option("--beta", beta, "Legacy warm-up moving average");
  prev->add_option("--out", preview_out, "Write CSV here instead of stdout");

  std::uint64_t gc_seed = 0;
  std::size_t gc_seeds = 10;
  double gc_tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op and loss");
  gc->add_option("--seed", gc_seed, "First seed");
  gc->add_option("--seeds", gc_seeds, "Number of seeds")->check(CLI::Range(std::size_t{1}, std::size_t{1000}));
  gc->add_option("--tolerance", gc_tol, "Relative error bound");

  std::string report_in;
  std::optional<std::string> report_out;
  auto* rep = app.add_subcommand("report", "Regenerate curves.csv / curves.svg from a sweep directory");
  rep->add_option("--in", report_in, "Sweep output directory")->required();
  rep->add_option("--out", report_out, "Destination (default: --in)");
  rep->add_flag("--svg", svg, "Also write curves.svg");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*train) return cmd_train(config, train_seed, out, loss, train_eta);
    if (*sw) return cmd_sweep(config, losses, etas, seeds, out, jobs, svg);
    if (*inj) return cmd_inject_noise(masks_dir, eta, noise_seed_value, out, classes, structural_fraction, max_radius);
    if (*prev) return cmd_schedule_preview(alpha_final, gamma, warmup, epochs, legacy, rho, mu, beta, preview_out);
    if (*gc) return cmd_gradcheck(gc_seed, gc_seeds, gc_tol);
    if (*rep) return cmd_report(report_in, report_out, svg);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const RangeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
