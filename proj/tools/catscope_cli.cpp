#include <CLI11.hpp>

#include <iostream>

#include "catscope/catscope.hpp"

namespace cs = catscope;
namespace pl = catscope::pipeline;
namespace ms = catscope::measurement;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> threshold;
  std::optional<std::string> out;
  std::optional<int> workers;
  std::optional<long long> trials;
  std::optional<int> bins;
  std::optional<double> tau_max;
  std::vector<std::string> set;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "YAML campaign config");
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--out", c.out, "output root (default $CATSCOPE_OUT or ./results)");
  app->add_option("--workers", c.workers, "worker threads");
  app->add_option("--set", c.set, "override any config key: key=value");
}

cs::config::CampaignConfig build_config(const Common& c, const std::string& command,
                                        cs::config::SourceMap& src) {
  auto cfg = c.config.empty() ? cs::config::CampaignConfig{} : cs::config::load_file(c.config, &src);
  for (const auto& kv : c.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw cs::Error(cs::Errc::ConfigError, "--set expects key=value, got '" + kv + "'");
    cs::config::set_value(cfg, kv.substr(0, eq), kv.substr(eq + 1), "--set " + kv.substr(0, eq), &src);
  }
  const auto flag = [&](const std::string& key, const std::string& name, const std::string& value) {
    cs::config::set_value(cfg, key, value, name, &src);
  };
  if (c.seed) flag("master_seed", "--seed", std::to_string(*c.seed));
  if (c.workers) flag("workers", "--workers", std::to_string(*c.workers));
  if (c.trials) {
    const std::string key = command == "search" ? "search.trials" : command == "tune-scan" ? "scan.trials" : "calibration.trials";
    flag(key, "--trials", std::to_string(*c.trials));
  }
  if (c.threshold)
    flag(command == "tune-scan" ? "thresholds.vacuum" : "thresholds.compass", "--threshold", pl::num(*c.threshold));
  if (c.bins) flag("scan.bins", "--bins", std::to_string(*c.bins));
  if (c.tau_max) flag("search.tau_max", "--tau-max", pl::num(*c.tau_max));
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"catscope: cat-state dark-photon search simulator"};
  app.require_subcommand(1);
  Common common;
  bool self_calibrate = false;
  std::string calibration;
  std::vector<std::string> from, figures;

  auto* cal = app.add_subcommand("calibrate", "mimic-displacement detector calibration");
  auto* search = app.add_subcommand("search", "on-resonance search with a global fit and limit");
  auto* scan = app.add_subcommand("tune-scan", "frequency-bin scan with background subtraction");
  auto* fig = app.add_subcommand("figures", "figure tables from prior runs");
  auto* sim = app.add_subcommand("simulate-record", "print one simulated readout record");
  for (auto* s : {cal, search, scan, fig, sim}) add_common(s, common);
  for (auto* s : {cal, search, scan}) {
    s->add_option("--trials", common.trials, "trials per point or bin");
    s->add_option("--threshold", common.threshold, "likelihood-ratio threshold");
  }
  for (auto* s : {search, scan}) {
    s->add_flag("--self-calibrate", self_calibrate, "run the calibration first");
    s->add_option("--calibration", calibration, "calibration.json or a calibrate run directory");
  }
  search->add_option("--tau-max", common.tau_max, "largest integration time (s)");
  scan->add_option("--bins", common.bins, "number of frequency bins");
  fig->add_option("ids", figures, "figure ids (" + [] {
    std::string s;
    for (const auto& id : pl::figure_ids()) s += (s.empty() ? "" : " ") + id;
    return s;
  }() + ")")->required();
  fig->add_option("--from", from, "run directories holding input artifacts");

  std::string mode = "compass";
  double alpha_sq = 12.0, beta = 0.0, tau = 0.0;
  sim->add_option("--mode", mode, "compass or vacuum");
  sim->add_option("--alpha-sq", alpha_sq, "compass |alpha|^2");
  sim->add_option("--beta", beta, "mimic displacement (real)");
  sim->add_option("--tau", tau, "integration time (s)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    cs::config::SourceMap src;
    auto cfg = build_config(common, command, src);
    cs::config::validate(cfg, src);

    if (command == "simulate-record") {
      ms::TrialConfig tc;
      tc.mode = ms::parse_mode(mode);
      tc.alpha_sq = alpha_sq;
      tc.tau = tau;
      tc.repeats = cfg.repeats;
      if (beta != 0.0) tc.injected_beta = cs::fock::cplx(beta, 0.0);
      tc.rng_seed = cs::rng::derive_seed(cfg.master_seed, "simulate-record", 0);
      const auto r = ms::simulate_record(tc, cfg.device);
      std::cout << pl::record_json(r, nlohmann::json{{"probe", pl::probe_label(tc.mode, alpha_sq)}}).dump() << '\n';
      return 0;
    }

    pl::Invocation inv;
    inv.command = command;
    inv.config = cfg;
    inv.sources = src;
    inv.out_root = pl::resolve_out_root(common.out);
    inv.self_calibrate = self_calibrate;
    if (!calibration.empty()) inv.calibration = calibration;
    for (const auto& f : from) inv.from.emplace_back(f);
    inv.figures = figures;
    const auto outcome = pl::execute(inv);
    std::cout << outcome.dir.string() << '\n';
    return 0;
  } catch (const cs::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == cs::Errc::ConfigError ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
