#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "catscope/pipeline.hpp"

namespace cfgns = catscope::config;
namespace pl = catscope::pipeline;
namespace ms = catscope::measurement;
namespace fs = std::filesystem;
using catscope::Errc;

namespace {

template <class F>
std::pair<Errc, std::string> failure(F&& f) {
  try {
    f();
  } catch (const catscope::Error& e) {
    return {e.code(), e.what()};
  }
  return {Errc::InvalidArgument, "<no error>"};
}

cfgns::CampaignConfig small_config() {
  cfgns::CampaignConfig c;
  c.master_seed = 11;
  c.calibration.trials = 3000;
  c.calibration.alpha_sq = {12.0};
  c.search.trials = 4000;
  c.scan.trials = 4000;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("catscope_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Config, RoundTripAndSortedKeys) {
  cfgns::CampaignConfig c;
  c.master_seed = 18446744073709551615ull;
  c.device = ms::DeviceParams::ideal();
  c.search.tau = {1e-5, 3.3e-5};
  c.scan.t1c.assign(16, 4.1e-3);
  c.point.omega_c = 40476279748.85089;
  const std::string text = cfgns::to_yaml(c);
  const auto back = cfgns::from_yaml(text);
  EXPECT_TRUE(back == c);
  EXPECT_EQ(cfgns::to_yaml(back), text);
  EXPECT_EQ(cfgns::from_yaml(cfgns::to_yaml(cfgns::CampaignConfig{})), cfgns::CampaignConfig{});
  std::vector<std::string> top;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.empty() && line[0] != ' ') top.push_back(line.substr(0, line.find(':')));
  EXPECT_TRUE(std::is_sorted(top.begin(), top.end()));
  EXPECT_EQ(top.front(), "calibration");
}

TEST(Config, PartialFileKeepsDefaults) {
  const auto c = cfgns::from_yaml("master_seed: 7\ndevice:\n  p_d: 0.02\n");
  EXPECT_EQ(c.master_seed, 7u);
  EXPECT_EQ(c.device.p_d, 0.02);
  EXPECT_EQ(c.device.T1c, 4.6e-3);
  EXPECT_EQ(c.thresholds.compass, 84.0);
  EXPECT_EQ(c.scan.bins, 16);
}

TEST(Config, LineAnchoredErrors) {
  auto [code, msg] = failure([] { cfgns::from_yaml("master_seed: 1\ndevice:\n  T1x: 3\n", "c.yaml"); });
  EXPECT_EQ(code, Errc::ConfigError);
  EXPECT_NE(msg.find("c.yaml:3"), std::string::npos) << msg;
  std::tie(code, msg) = failure([] { cfgns::from_yaml("search:\n  trials: many\n", "c.yaml"); });
  EXPECT_NE(msg.find("c.yaml:2"), std::string::npos) << msg;
  std::tie(code, msg) = failure([] { cfgns::from_yaml("a: [1,\n", "c.yaml"); });
  EXPECT_EQ(code, Errc::ConfigError);
  cfgns::SourceMap src;
  const auto c = cfgns::from_yaml("workers: 1\n\ncalibration:\n  trials: 0\n", "c.yaml", &src);
  std::tie(code, msg) = failure([&] { cfgns::validate(c, src); });
  EXPECT_EQ(code, Errc::ConfigError);
  EXPECT_NE(msg.find("c.yaml:4"), std::string::npos) << msg;
  EXPECT_NE(msg.find("calibration.trials"), std::string::npos);
}

TEST(Config, FlagOverridesAndValidation) {
  cfgns::CampaignConfig c;
  cfgns::SourceMap src;
  cfgns::set_value(c, "calibration.trials", "0", "--trials", &src);
  const auto [code, msg] = failure([&] { cfgns::validate(c, src); });
  EXPECT_EQ(code, Errc::ConfigError);
  EXPECT_NE(msg.find("--trials"), std::string::npos) << msg;
  EXPECT_EQ(failure([&] { cfgns::set_value(c, "nope", "1", "--set"); }).first, Errc::ConfigError);
  cfgns::set_value(c, "search.tau", "[1e-5, 2e-5]", "--set");
  EXPECT_EQ(c.search.tau, (std::vector<double>{1e-5, 2e-5}));
  cfgns::CampaignConfig bad;
  bad.scan.inject_bin = 16;
  EXPECT_THROW(cfgns::validate(bad), catscope::Error);
  bad = {};
  bad.device.p_d = 2.0;
  EXPECT_THROW(cfgns::validate(bad), catscope::Error);
  EXPECT_NO_THROW(cfgns::validate(cfgns::CampaignConfig{}));
}

TEST(Search, TauScheduleCappedBelowCoherenceTime) {
  cfgns::CampaignConfig c;
  const double tdm = cfgns::tau_dm(c);
  EXPECT_NEAR(tdm, 152e-6, 0.02 * 152e-6);
  c.search.tau = {20e-6, 100e-6, 150e-6, 200e-6, 400e-6};
  const auto t = pl::capped_tau(c);
  EXPECT_EQ(t, (std::vector<double>{20e-6, 100e-6, 150e-6}));
  c.search.tau_max = 120e-6;
  EXPECT_EQ(pl::capped_tau(c), (std::vector<double>{20e-6, 100e-6}));
  c.search.tau = {200e-6, 400e-6};
  c.search.tau_max = 0.0;
  EXPECT_EQ(failure([&] { pl::capped_tau(c); }).first, Errc::ConfigError);
}

TEST(Pipeline, DeterministicCalibrationAndJsonRoundTrip) {
  pl::Invocation inv;
  inv.command = "calibrate";
  inv.config = small_config();
  pl::MemorySink a, b;
  const auto ma = pl::run_command(inv, a);
  const auto mb = pl::run_command(inv, b);
  EXPECT_EQ(a.files, b.files);
  EXPECT_EQ(ma, mb);
  for (const char* f : {"calibration.json", "calibration.csv", "enhancement.csv", "records.jsonl", "config.yaml"})
    EXPECT_TRUE(a.files.count(f)) << f;
  const auto rep = pl::calibration_from_json(nlohmann::json::parse(a.files["calibration.json"]));
  EXPECT_EQ(pl::to_json(rep).dump(2) + "\n", a.files["calibration.json"]);
  EXPECT_EQ(rep.probes.size(), 2u);
  EXPECT_EQ(rep.vacuum().label, "vacuum");
  EXPECT_EQ(rep.compass(12.0).label, "compass12");
  EXPECT_GT(rep.compass(12.0).fit.value("eta"), 0.2);
  inv.config.master_seed = 12;
  pl::MemorySink c;
  pl::run_command(inv, c);
  EXPECT_NE(c.files["records.jsonl"], a.files["records.jsonl"]);
  inv.config.workers = 3;
  inv.config.master_seed = 11;
  pl::MemorySink d;
  pl::run_command(inv, d);
  EXPECT_EQ(d.files["records.jsonl"], a.files["records.jsonl"]);
}

TEST(Pipeline, SearchNeedsCalibration) {
  pl::Invocation inv;
  inv.command = "search";
  inv.config = small_config();
  pl::MemorySink s;
  EXPECT_EQ(failure([&] { pl::run_command(inv, s); }).first, Errc::MissingCalibration);
  inv.calibration = fs::temp_directory_path() / "catscope_no_such_calibration.json";
  EXPECT_EQ(failure([&] { pl::run_command(inv, s); }).first, Errc::MissingCalibration);
}

TEST(Pipeline, SearchRecoversInjectedSignal) {
  auto cfg = small_config();
  cfg.calibration.trials = 10000;
  cfg.search.trials = 10000;
  cfg.search.epsilon_inj = 4e-15;
  cfg.write_records = false;
  const auto cal = pl::run_calibration(cfg);
  const auto rep = pl::run_search(cfg, cal);
  ASSERT_EQ(rep.series.size(), 2u);
  EXPECT_LT(rep.tau_ref, rep.tau_dm);
  const double eps0 = rep.limit.epsilon0;
  EXPECT_NEAR(eps0, 4e-15, 3.0 * rep.limit.sigma_eps) << eps0 << " +- " << rep.limit.sigma_eps;
  EXPECT_GT(rep.limit.eps90, eps0);
  EXPECT_EQ(rep.offres.size(), 101u);
  // zero signal: finite positive limit
  cfg.search.epsilon_inj = 0.0;
  const auto nul = pl::run_search(cfg, cal);
  EXPECT_TRUE(std::isfinite(nul.limit.eps90));
  EXPECT_GT(nul.limit.eps90, 0.0);
}

TEST(Pipeline, ScanLocalizesInjectedBin) {
  auto cfg = small_config();
  cfg.write_records = false;
  cfg.calibration.alpha_sq = {4.0};
  cfg.scan.trials = 20000;
  cfg.scan.inject_bin = 5;
  cfg.scan.epsilon_inj = 2e-16;
  const auto cal = pl::run_calibration(cfg);
  const auto rep = pl::run_scan(cfg, cal);
  ASSERT_EQ(rep.background.bins.size(), 16u);
  EXPECT_DOUBLE_EQ(rep.background.eta_fit, 0.9375);
  int best = 0;
  for (int i = 1; i < 16; ++i)
    if (rep.background.bins[i].p > rep.background.bins[best].p) best = i;
  EXPECT_EQ(best, 5);
  const auto& b = rep.background.bins[5];
  EXPECT_NEAR(b.p, 4e-32, 3.0 * b.sigma_p);
  const double tp = 2.0 * std::numbers::pi;
  EXPECT_NEAR((pl::bin_omega(cfg, 1) - pl::bin_omega(cfg, 0)) / tp, 6e3, 1e-6);
}

TEST(Figures, UnknownIdAndModelTables) {
  const cfgns::CampaignConfig cfg;
  const auto [code, msg] = failure([&] { pl::figure_table("9Z", cfg, {}); });
  EXPECT_EQ(code, Errc::InvalidArgument);
  for (const auto& id : pl::figure_ids()) EXPECT_NE(msg.find(id), std::string::npos) << id;
  const std::string gt = pl::figure_table("S-gt", cfg, {});
  EXPECT_EQ(gt.rfind("t,g,coherent,incoherent\n", 0), 0u);
  EXPECT_EQ(pl::figure_table("S-gt", cfg, {}), gt);
  EXPECT_EQ(failure([&] { pl::figure_table("2E", cfg, {}); }).first, Errc::MissingArtifact);
  EXPECT_EQ(failure([&] { pl::figure_table("4F", cfg, {fs::temp_directory_path()}); }).first,
            Errc::MissingArtifact);
}

TEST(RunDirectory, CommitAndQuarantine) {
  const fs::path base = fresh_dir("rundir");
  pl::Invocation inv;
  inv.command = "calibrate";
  inv.config = small_config();
  inv.config.calibration.trials = 500;
  inv.config.calibration.alpha_sq = {4.0};
  inv.out_root = base / "results";
  const auto ok = pl::execute(inv);
  EXPECT_EQ(ok.dir, fs::absolute(inv.out_root) / ok.hash);
  for (const char* f : {"manifest.json", "timing.json", "calibration.json", "records.jsonl"})
    EXPECT_TRUE(fs::exists(ok.dir / f)) << f;
  const auto manifest = nlohmann::json::parse(pl::read_file(ok.dir / "manifest.json"));
  EXPECT_EQ(manifest["seed"], 11);
  EXPECT_TRUE(manifest["files"].contains("calibration.json"));
  EXPECT_FALSE(manifest["files"].contains("timing.json"));

  // search at an uncalibrated |alpha|^2 fails after writing config.yaml
  pl::Invocation bad = inv;
  bad.command = "search";
  bad.calibration = ok.dir;
  bad.config.search.alpha_sq = {12.0};
  EXPECT_EQ(failure([&] { pl::execute(bad); }).first, Errc::MissingCalibration);
  const std::string h = pl::run_hash(bad);
  EXPECT_FALSE(fs::exists(fs::absolute(inv.out_root) / h));
  EXPECT_TRUE(fs::exists(base / "quarantine" / (h + ".0") / "error.txt"));
  EXPECT_TRUE(fs::exists(base / "quarantine" / (h + ".0") / "config.yaml"));
  std::size_t entries = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(inv.out_root)) ++entries;
  EXPECT_EQ(entries, 1u);
}

TEST(RunDirectory, OutputRootResolution) {
  EXPECT_EQ(pl::resolve_out_root(std::string("x")), fs::path("x"));
  setenv("CATSCOPE_OUT", "/tmp/envroot", 1);
  EXPECT_EQ(pl::resolve_out_root(std::nullopt), fs::path("/tmp/envroot"));
  EXPECT_EQ(pl::resolve_out_root(std::string("y")), fs::path("y"));
  unsetenv("CATSCOPE_OUT");
  EXPECT_EQ(pl::resolve_out_root(std::nullopt), fs::path("results"));
}
