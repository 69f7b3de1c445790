#pragma once

// Seeded end-to-end campaigns (prepare -> inject -> measure -> infer -> fit ->
// limit), figure tables, and run directories with manifests.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "catscope/analysis.hpp"
#include "catscope/config.hpp"
#include "catscope/dm_model.hpp"
#include "catscope/error.hpp"
#include "catscope/fock.hpp"
#include "catscope/hmm.hpp"
#include "catscope/measurement.hpp"
#include "catscope/rng.hpp"
#include "json.hpp"

namespace catscope::pipeline {

namespace fs = std::filesystem;
namespace ms = measurement;
namespace an = analysis;
using config::CampaignConfig;
using nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";

inline const std::map<std::string, std::string>& module_versions() {
  static const std::map<std::string, std::string> v{
      {"analysis", "1.0"}, {"dm_model", "1.0"}, {"fock", "1.0"},     {"hmm", "1.0"},
      {"measurement", "1.0"}, {"open_system", "1.0"}, {"pipeline", "1.0"}};
  return v;
}

/// Shortest round-trip decimal, '.' separator regardless of locale.
inline std::string num(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline std::string hex64(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return s;
}

inline std::string probe_label(ms::ProbeMode mode, double alpha_sq) {
  return mode == ms::ProbeMode::Vacuum ? "vacuum" : "compass" + num(alpha_sq);
}

// ---------------------------------------------------------------------------
// Trial groups.

/// Lambda memo keyed by the packed symbol string (records up to 56 symbols).
class LambdaCache {
 public:
  explicit LambdaCache(hmm::HmmModel model) : model_(std::move(model)) {}

  double operator()(const ms::ReadoutRecord& r) {
    if (r.symbols.size() > 56) return hmm::forward_backward(model_, r).lambda;
    std::uint64_t key = static_cast<std::uint64_t>(r.symbols.size()) << 56;
    for (std::size_t i = 0; i < r.symbols.size(); ++i) key |= static_cast<std::uint64_t>(r.symbols[i] & 1) << i;
    const auto it = memo_.find(key);
    if (it != memo_.end()) return it->second;
    const double l = hmm::forward_backward(model_, r).lambda;
    memo_.emplace(key, l);
    return l;
  }
  const hmm::HmmModel& model() const { return model_; }

 private:
  hmm::HmmModel model_;
  std::unordered_map<std::uint64_t, double> memo_;
};

inline LambdaCache make_cache(const CampaignConfig& cfg, ms::ProbeMode mode, double alpha_sq) {
  return LambdaCache(hmm::make_model(cfg.device, mode == ms::ProbeMode::Vacuum ? 1.0 : alpha_sq, mode));
}

struct GroupResult {
  long long k_pos = 0;
  long long kept = 0;
  long long dropped = 0;
  long long injected = 0;
  double prep_fidelity = 1.0;
  double dm_probability = 0.0;
  std::vector<double> lambdas;
};

inline json record_json(const ms::ReadoutRecord& r, const json& tag) {
  json j = tag;
  j["symbols"] = r.symbol_string();
  j["trial_id"] = r.trial_id;
  if (r.truth) {
    j["truth"] = {{"injected", r.truth->injected},
                  {"measured_sector", r.truth->measured_sector},
                  {"prepared_sector", r.truth->prepared_sector}};
  }
  return j;
}

/// Simulate, post-select, classify; records appended as JSON lines in trial order.
inline GroupResult run_group(const CampaignConfig& cfg, const ms::TrialConfig& tc, long long trials,
                             double threshold, LambdaCache& cache, const json& tag,
                             std::string* records, bool keep_lambdas = false) {
  const auto res = ms::run_campaign(trials, tc, cfg.device, cfg.workers);
  GroupResult g;
  g.prep_fidelity = res.prep_fidelity;
  g.dm_probability = res.plan.dm_probability;
  g.injected = res.injected_count;
  for (const auto& r : res.records) {
    if (records) {
      *records += record_json(r, tag).dump();
      *records += '\n';
    }
    if (r.has_leakage()) {
      ++g.dropped;
      continue;
    }
    ++g.kept;
    const double l = cache(r);
    g.k_pos += hmm::classify(l, threshold) ? 1 : 0;
    if (keep_lambdas) g.lambdas.push_back(l);
  }
  require(g.kept > 0, Errc::NonFinite, "every record of group " + tag.dump() + " leaked");
  return g;
}

inline ms::TrialConfig trial_config(const CampaignConfig& cfg, ms::ProbeMode mode, double alpha_sq,
                                    std::uint64_t seed) {
  ms::TrialConfig tc;
  tc.mode = mode;
  tc.alpha_sq = mode == ms::ProbeMode::Vacuum ? 1.0 : alpha_sq;
  tc.repeats = cfg.repeats;
  tc.rng_seed = seed;
  return tc;
}

// ---------------------------------------------------------------------------
// Calibration.

struct ProbeCalibration {
  std::string label;
  ms::ProbeMode mode = ms::ProbeMode::Vacuum;
  double alpha_sq = 1.0;  // design multiplier; 1 for vacuum
  double threshold = 0.0;
  double prep_fidelity = 1.0;
  std::vector<an::CalibrationPoint> points;
  std::vector<long long> dropped;
  an::FitResult fit;
  std::vector<std::vector<double>> lambdas;  // per point, only when requested
};

struct CalibrationReport {
  std::vector<ProbeCalibration> probes;  // vacuum first

  const ProbeCalibration& vacuum() const {
    for (const auto& p : probes)
      if (p.mode == ms::ProbeMode::Vacuum) return p;
    throw Error(Errc::MissingCalibration, "calibration has no vacuum probe");
  }
  const ProbeCalibration& compass(double alpha_sq) const {
    for (const auto& p : probes)
      if (p.mode == ms::ProbeMode::Compass && std::abs(p.alpha_sq - alpha_sq) < 1e-12 * alpha_sq) return p;
    throw Error(Errc::MissingCalibration, "no calibration for compass |alpha|^2 = " + num(alpha_sq));
  }
  const ProbeCalibration& probe(ms::ProbeMode mode, double alpha_sq) const {
    return mode == ms::ProbeMode::Vacuum ? vacuum() : compass(alpha_sq);
  }
};

struct Enhancement {
  double alpha_sq = 0.0;
  double factor = 0.0;
  double sigma = 0.0;
};

inline Enhancement enhancement(const CalibrationReport& rep, double alpha_sq) {
  const auto& c = rep.compass(alpha_sq).fit;
  const auto& v = rep.vacuum().fit;
  Enhancement e;
  e.alpha_sq = alpha_sq;
  e.factor = an::enhancement_factor(c.value("eta"), alpha_sq, v.value("eta"));
  e.sigma = std::abs(e.factor) * std::hypot(c.sigma("eta") / c.value("eta"), v.sigma("eta") / v.value("eta"));
  return e;
}

inline ProbeCalibration calibrate_probe(const CampaignConfig& cfg, ms::ProbeMode mode, double alpha_sq,
                                        std::string* records, bool keep_lambdas) {
  ProbeCalibration pc;
  pc.mode = mode;
  pc.alpha_sq = mode == ms::ProbeMode::Vacuum ? 1.0 : alpha_sq;
  pc.label = probe_label(mode, pc.alpha_sq);
  pc.threshold = mode == ms::ProbeMode::Vacuum ? cfg.thresholds.vacuum : cfg.thresholds.compass;
  const auto& grid = mode == ms::ProbeMode::Vacuum ? cfg.calibration.n_inj_vacuum : cfg.calibration.n_inj_compass;
  LambdaCache cache = make_cache(cfg, mode, pc.alpha_sq);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    auto tc = trial_config(cfg, mode, pc.alpha_sq,
                           rng::derive_seed(cfg.master_seed, "calibrate/" + pc.label, i));
    if (grid[i] > 0.0) tc.injected_beta = fock::cplx(std::sqrt(grid[i]), 0.0);
    const json tag{{"n_inj", grid[i]}, {"probe", pc.label}, {"stage", "calibrate"}};
    const auto g = run_group(cfg, tc, cfg.calibration.trials, pc.threshold, cache, tag, records, keep_lambdas);
    pc.points.push_back({grid[i], g.k_pos, g.kept});
    pc.dropped.push_back(g.dropped);
    pc.prep_fidelity = g.prep_fidelity;
    if (keep_lambdas) pc.lambdas.push_back(g.lambdas);
  }
  an::CalibrationCurve curve{pc.points, pc.alpha_sq};
  pc.fit = an::calibrate_detector(curve, pc.alpha_sq);
  return pc;
}

inline CalibrationReport run_calibration(const CampaignConfig& cfg, std::string* records = nullptr,
                                         bool keep_lambdas = false) {
  CalibrationReport rep;
  rep.probes.push_back(calibrate_probe(cfg, ms::ProbeMode::Vacuum, 1.0, records, keep_lambdas));
  for (double a : cfg.calibration.alpha_sq)
    rep.probes.push_back(calibrate_probe(cfg, ms::ProbeMode::Compass, a, records, keep_lambdas));
  return rep;
}

inline json to_json(const CalibrationReport& rep) {
  json probes = json::array();
  for (const auto& p : rep.probes) {
    json pts = json::array();
    for (std::size_t i = 0; i < p.points.size(); ++i)
      pts.push_back({{"dropped", p.dropped[i]},
                     {"k_pos", p.points[i].k_pos},
                     {"n_inj", p.points[i].n_inj},
                     {"n_trials", p.points[i].n_trials}});
    probes.push_back({{"alpha_sq", p.alpha_sq},
                      {"fit", an::to_json(p.fit)},
                      {"label", p.label},
                      {"mode", ms::to_string(p.mode)},
                      {"points", pts},
                      {"prep_fidelity", p.prep_fidelity},
                      {"threshold", p.threshold}});
  }
  json enh = json::array();
  for (const auto& p : rep.probes) {
    if (p.mode != ms::ProbeMode::Compass) continue;
    const auto e = enhancement(rep, p.alpha_sq);
    enh.push_back({{"alpha_sq", e.alpha_sq}, {"factor", e.factor}, {"sigma", e.sigma}});
  }
  return {{"enhancement", enh}, {"kind", "calibration"}, {"probes", probes}};
}

inline CalibrationReport calibration_from_json(const json& j) {
  CalibrationReport rep;
  try {
    require(j.at("kind") == "calibration", Errc::MissingCalibration, "document is not a calibration");
    for (const auto& p : j.at("probes")) {
      ProbeCalibration pc;
      pc.label = p.at("label").get<std::string>();
      pc.mode = ms::parse_mode(p.at("mode").get<std::string>());
      pc.alpha_sq = p.at("alpha_sq").get<double>();
      pc.threshold = p.at("threshold").get<double>();
      pc.prep_fidelity = p.at("prep_fidelity").get<double>();
      for (const auto& q : p.at("points")) {
        pc.points.push_back({q.at("n_inj").get<double>(), q.at("k_pos").get<long long>(),
                             q.at("n_trials").get<long long>()});
        pc.dropped.push_back(q.at("dropped").get<long long>());
      }
      pc.fit = an::fit_from_json(p.at("fit"));
      rep.probes.push_back(std::move(pc));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::MissingCalibration, std::string("malformed calibration: ") + e.what());
  }
  return rep;
}

inline std::string calibration_csv(const CalibrationReport& rep) {
  std::string s = "probe,alpha_sq,n_inj,k_pos,n_trials,dropped,n_meas\n";
  for (const auto& p : rep.probes)
    for (std::size_t i = 0; i < p.points.size(); ++i) {
      const auto& q = p.points[i];
      s += p.label + ',' + num(p.alpha_sq) + ',' + num(q.n_inj) + ',' + std::to_string(q.k_pos) + ',' +
           std::to_string(q.n_trials) + ',' + std::to_string(p.dropped[i]) + ',' +
           num(static_cast<double>(q.k_pos) / static_cast<double>(q.n_trials)) + '\n';
    }
  return s;
}

inline std::string enhancement_csv(const CalibrationReport& rep) {
  std::string s = "probe,alpha_sq,eta,sigma_eta,delta,sigma_delta,eta_alpha_sq,enhancement,sigma_enhancement\n";
  for (const auto& p : rep.probes) {
    const double eta = p.fit.value("eta");
    Enhancement e{p.alpha_sq, 1.0, 0.0};
    if (p.mode == ms::ProbeMode::Compass) e = enhancement(rep, p.alpha_sq);
    s += p.label + ',' + num(p.alpha_sq) + ',' + num(eta) + ',' + num(p.fit.sigma("eta")) + ',' +
         num(p.fit.value("delta")) + ',' + num(p.fit.sigma("delta")) + ',' + num(eta * p.alpha_sq) + ',' +
         num(e.factor) + ',' + num(e.sigma) + '\n';
  }
  return s;
}

// ---------------------------------------------------------------------------
// Search.

struct SearchReport {
  std::vector<an::SearchSeries> series;
  std::vector<std::vector<double>> g;  // g(tau) per series point
  an::FitResult global;
  an::ExclusionPoint limit;
  std::vector<an::FitResult> per_probe_fit;
  std::vector<an::ExclusionPoint> per_probe;
  std::vector<an::ExclusionPoint> offres;
  double tau_dm = 0.0;
  double tau_ref = 0.0;
  double epsilon_inj = 0.0;
};

/// Schedule entries at or above tau_max (default tau_DM) are dropped with a warning.
inline std::vector<double> capped_tau(const CampaignConfig& cfg) {
  const double tdm = config::tau_dm(cfg);
  double cap = cfg.search.tau_max > 0.0 ? cfg.search.tau_max : tdm;
  if (cap > tdm) warn("search.tau_max " + num(cap) + " s exceeds tau_DM " + num(tdm) + " s");
  std::vector<double> out;
  for (double t : cfg.search.tau) {
    if (t < cap)
      out.push_back(t);
    else
      warn("tau " + num(t) + " s dropped (>= tau_max " + num(cap) + " s)");
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  require(out.size() >= 2, Errc::ConfigError, "search.tau keeps fewer than 2 values below tau_max");
  return out;
}

inline SearchReport run_search(const CampaignConfig& cfg, const CalibrationReport& cal,
                               std::string* records = nullptr) {
  SearchReport rep;
  rep.tau_dm = config::tau_dm(cfg);
  rep.epsilon_inj = cfg.search.epsilon_inj;
  const auto taus = capped_tau(cfg);
  rep.tau_ref = taus.back();
  const auto g = [&](double t) { return dm::g_of_t(t, cfg.point, cfg.halo); };

  std::vector<std::pair<ms::ProbeMode, double>> probes;
  if (cfg.search.vacuum) probes.emplace_back(ms::ProbeMode::Vacuum, 1.0);
  for (double a : cfg.search.alpha_sq) probes.emplace_back(ms::ProbeMode::Compass, a);

  for (const auto& [mode, a] : probes) {
    const auto& pc = cal.probe(mode, a);
    an::SearchSeries s;
    s.label = pc.label;
    s.alpha_sq = pc.alpha_sq;
    s.eta = pc.fit.value("eta");
    require(s.eta > 0.0, Errc::ZeroEfficiency, "calibrated efficiency of " + pc.label + " is not positive");
    LambdaCache cache = make_cache(cfg, mode, pc.alpha_sq);
    std::vector<double> gs;
    for (std::size_t i = 0; i < taus.size(); ++i) {
      auto tc = trial_config(cfg, mode, pc.alpha_sq, rng::derive_seed(cfg.master_seed, "search/" + pc.label, i));
      tc.tau = taus[i];
      if (cfg.search.epsilon_inj > 0.0) tc.dm = ms::DmInjection{cfg.search.epsilon_inj, cfg.point, cfg.halo};
      const json tag{{"probe", pc.label}, {"stage", "search"}, {"tau", taus[i]}};
      const auto r = run_group(cfg, tc, cfg.search.trials, pc.threshold, cache, tag, records);
      s.tau.push_back(taus[i]);
      s.k_pos.push_back(r.k_pos);
      s.n_trials.push_back(r.kept);
      gs.push_back(g(taus[i]));
    }
    rep.series.push_back(s);
    rep.g.push_back(gs);
  }
  for (const auto& s : rep.series) {
    const auto f = an::search_fit({s}, g, rep.tau_dm);
    rep.per_probe_fit.push_back(f);
    rep.per_probe.push_back(an::epsilon_limit(f.value("a0"), f.sigma("a0"), cfg.point, cfg.halo));
  }
  rep.global = an::search_fit(rep.series, g, rep.tau_dm);
  rep.limit = an::epsilon_limit(rep.global.value("a0"), rep.global.sigma("a0"), cfg.point, cfg.halo);
  std::vector<double> grid;
  const int n = cfg.search.offres_points;
  for (int i = 0; i < n; ++i)
    grid.push_back(cfg.point.m_dm +
                   2.0 * std::numbers::pi * cfg.search.offres_span_hz * (static_cast<double>(i) / (n - 1) - 0.5));
  rep.offres = an::off_resonance_limit(rep.limit, grid, cfg.point, cfg.halo, rep.tau_ref);
  return rep;
}

inline json to_json(const SearchReport& rep) {
  json series = json::array();
  for (std::size_t i = 0; i < rep.series.size(); ++i) {
    const auto& s = rep.series[i];
    series.push_back({{"alpha_sq", s.alpha_sq},
                      {"eta", s.eta},
                      {"fit", an::to_json(rep.per_probe_fit[i])},
                      {"g", rep.g[i]},
                      {"k_pos", s.k_pos},
                      {"label", s.label},
                      {"limit", an::to_json(rep.per_probe[i])},
                      {"n_trials", s.n_trials},
                      {"tau", s.tau}});
  }
  return {{"epsilon_inj", rep.epsilon_inj},
          {"fit", an::to_json(rep.global)},
          {"kind", "search"},
          {"limit", an::to_json(rep.limit)},
          {"series", series},
          {"tau_dm", rep.tau_dm},
          {"tau_ref", rep.tau_ref}};
}

inline std::string search_csv(const SearchReport& rep) {
  std::string s = "probe,alpha_sq,tau,k_pos,n_trials,n_meas,g\n";
  for (std::size_t i = 0; i < rep.series.size(); ++i) {
    const auto& sr = rep.series[i];
    for (std::size_t k = 0; k < sr.tau.size(); ++k)
      s += sr.label + ',' + num(sr.alpha_sq) + ',' + num(sr.tau[k]) + ',' + std::to_string(sr.k_pos[k]) + ',' +
           std::to_string(sr.n_trials[k]) + ',' +
           num(static_cast<double>(sr.k_pos[k]) / static_cast<double>(sr.n_trials[k])) + ',' + num(rep.g[i][k]) +
           '\n';
  }
  return s;
}

inline std::string limits_csv(const std::vector<an::ExclusionPoint>& pts) {
  std::string s = "m_dm_Hz,eps90\n";
  for (const auto& p : pts) s += num(p.m_dm / (2.0 * std::numbers::pi)) + ',' + num(p.eps90) + '\n';
  return s;
}

// ---------------------------------------------------------------------------
// Frequency scan.

struct ScanReport {
  std::vector<an::FrequencyBin> bins;
  std::vector<long long> dropped;
  an::BackgroundResult background;
  double eta = 0.0;
  double m_inj = 0.0;
  double epsilon_inj = 0.0;
  int inject_bin = -1;
};

/// Cavity frequency of bin i (rad/s), centred on the search point.
inline double bin_omega(const CampaignConfig& cfg, int i) {
  return cfg.point.omega_c + 2.0 * std::numbers::pi * cfg.scan.spacing_hz * (i - cfg.scan.bins / 2);
}

/// Mass whose lineshape peak sits on omega.
inline double mass_on_peak(double omega, const dm::HaloParams& halo) {
  return omega / (1.0 + dm::peak_offset(halo));
}

inline ScanReport run_scan(const CampaignConfig& cfg, const CalibrationReport& cal,
                           std::string* records = nullptr) {
  ScanReport rep;
  const auto& vac = cal.vacuum();
  rep.eta = vac.fit.value("eta");
  require(rep.eta > 0.0, Errc::ZeroEfficiency, "calibrated vacuum efficiency is not positive");
  rep.inject_bin = cfg.scan.inject_bin;
  rep.epsilon_inj = cfg.scan.epsilon_inj;
  const bool inject = cfg.scan.inject_bin >= 0 && cfg.scan.epsilon_inj > 0.0;
  if (inject) rep.m_inj = mass_on_peak(bin_omega(cfg, cfg.scan.inject_bin), cfg.halo);
  LambdaCache cache = make_cache(cfg, ms::ProbeMode::Vacuum, 1.0);
  for (int i = 0; i < cfg.scan.bins; ++i) {
    const double omega = bin_omega(cfg, i);
    const double t1c = cfg.scan.t1c.empty() ? cfg.device.T1c : cfg.scan.t1c[static_cast<std::size_t>(i)];
    auto tc = trial_config(cfg, ms::ProbeMode::Vacuum, 1.0,
                           rng::derive_seed(cfg.master_seed, "scan", static_cast<std::uint64_t>(i)));
    tc.tau = t1c;
    if (inject)
      tc.dm = ms::DmInjection{cfg.scan.epsilon_inj, dm::SearchPoint{rep.m_inj, omega, cfg.point.v_eff}, cfg.halo};
    const json tag{{"bin", i}, {"probe", "vacuum"}, {"stage", "scan"}};
    const auto r = run_group(cfg, tc, cfg.scan.trials, vac.threshold, cache, tag, records);
    an::FrequencyBin b;
    b.omega_i = omega;
    b.n_meas = r.k_pos;
    b.n_trials = r.kept;
    b.eta = rep.eta;
    b.t1c = t1c;
    b.m_dm = mass_on_peak(omega, cfg.halo);
    rep.bins.push_back(b);
    rep.dropped.push_back(r.dropped);
  }
  rep.background = an::background_subtract(rep.bins, cfg.point, cfg.halo);
  return rep;
}

inline json to_json(const ScanReport& rep) {
  json bins = json::array();
  for (std::size_t i = 0; i < rep.bins.size(); ++i) {
    const auto& b = rep.bins[i];
    const auto& r = rep.background.bins[i];
    bins.push_back({{"delta", static_cast<double>(b.n_meas) / static_cast<double>(b.n_trials)},
                    {"dropped", rep.dropped[i]},
                    {"eps2_90_gauss", r.eps2_90_gauss},
                    {"eps90", r.eps90},
                    {"eta", b.eta},
                    {"m_dm", r.m_dm},
                    {"n_i", r.n_i},
                    {"n_meas", b.n_meas},
                    {"n_ref", r.n_ref},
                    {"n_trials", b.n_trials},
                    {"omega_c", b.omega_i},
                    {"p", r.p},
                    {"sigma_n_i", r.sigma_n_i},
                    {"sigma_p", r.sigma_p},
                    {"t1c", b.t1c}});
  }
  return {{"bins", bins},
          {"epsilon_inj", rep.epsilon_inj},
          {"eta_fit", rep.background.eta_fit},
          {"inject_bin", rep.inject_bin},
          {"kind", "scan"},
          {"m_inj", rep.m_inj},
          {"n_bar", rep.background.n_bar},
          {"sigma_n", rep.background.sigma_n}};
}

inline std::string scan_csv(const ScanReport& rep) {
  std::string s = "bin,omega_c_Hz,m_dm_Hz,t1c,n_meas,n_trials,eta,delta,n_i,sigma_n_i,n_ref,p,sigma_p,eps90\n";
  const double tp = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < rep.bins.size(); ++i) {
    const auto& b = rep.bins[i];
    const auto& r = rep.background.bins[i];
    s += std::to_string(i) + ',' + num(b.omega_i / tp) + ',' + num(r.m_dm / tp) + ',' + num(b.t1c) + ',' +
         std::to_string(b.n_meas) + ',' + std::to_string(b.n_trials) + ',' + num(b.eta) + ',' +
         num(static_cast<double>(b.n_meas) / static_cast<double>(b.n_trials)) + ',' + num(r.n_i) + ',' +
         num(r.sigma_n_i) + ',' + num(r.n_ref) + ',' + num(r.p) + ',' + num(r.sigma_p) + ',' + num(r.eps90) + '\n';
  }
  return s;
}

inline std::vector<an::ExclusionPoint> scan_limits(const ScanReport& rep) {
  std::vector<an::ExclusionPoint> out;
  for (const auto& r : rep.background.bins) {
    an::ExclusionPoint e;
    e.m_dm = r.m_dm;
    e.eps90 = r.eps90;
    out.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Artifact sinks and run directories.

class Sink {
 public:
  virtual ~Sink() = default;
  virtual void put(const std::string& name, const std::string& content) = 0;
};

class MemorySink : public Sink {
 public:
  void put(const std::string& name, const std::string& content) override { files[name] = content; }
  std::map<std::string, std::string> files;
};

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(static_cast<bool>(in), Errc::MissingArtifact, "cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::IoError, "cannot write '" + p.string() + "'");
  out << content;
  out.close();
  require(static_cast<bool>(out), Errc::IoError, "write failed for '" + p.string() + "'");
}

/// Files land in a staging directory; commit() renames it to <root>/<hash>,
/// quarantine() moves it next to the root, never inside it.
class StagedRun : public Sink {
 public:
  StagedRun(const fs::path& root, std::string hash) : root_(fs::absolute(root)), hash_(std::move(hash)) {
    const fs::path base = root_.parent_path();
    staging_ = base / ".catscope-staging" / (root_.filename().string() + "-" + hash_);
    std::error_code ec;
    fs::remove_all(staging_, ec);
    fs::create_directories(staging_, ec);
    require(!ec, Errc::IoError, "cannot create staging directory '" + staging_.string() + "'");
  }

  void put(const std::string& name, const std::string& content) override {
    write_file(staging_ / name, content);
    files_[name] = content.size();
    hashes_[name] = hex64(rng::fnv1a(content));
  }

  fs::path commit(json manifest, double wall_seconds) {
    json reg = json::object();
    for (const auto& [name, bytes] : files_) reg[name] = {{"bytes", bytes}, {"fnv1a64", hashes_[name]}};
    manifest["files"] = reg;
    write_file(staging_ / "manifest.json", manifest.dump(2) + "\n");
    write_file(staging_ / "timing.json", json{{"wall_clock_s", wall_seconds}}.dump(2) + "\n");
    std::error_code ec;
    fs::create_directories(root_, ec);
    const fs::path dest = root_ / hash_;
    fs::remove_all(dest, ec);
    fs::rename(staging_, dest, ec);
    require(!ec, Errc::IoError, "cannot move run into '" + dest.string() + "': " + ec.message());
    committed_ = true;
    return dest;
  }

  fs::path quarantine(const std::string& reason) {
    const fs::path qroot = root_.parent_path() / "quarantine";
    std::error_code ec;
    fs::create_directories(qroot, ec);
    fs::path dest;
    for (int n = 0;; ++n) {
      dest = qroot / (hash_ + "." + std::to_string(n));
      if (!fs::exists(dest)) break;
    }
    write_file(staging_ / "error.txt", reason + "\n");
    fs::rename(staging_, dest, ec);
    committed_ = true;
    return dest;
  }

  ~StagedRun() override {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }

 private:
  fs::path root_, staging_;
  std::string hash_;
  std::map<std::string, std::size_t> files_;
  std::map<std::string, std::string> hashes_;
  bool committed_ = false;
};

/// --out, else CATSCOPE_OUT, else ./results.
inline fs::path resolve_out_root(const std::optional<std::string>& flag) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv("CATSCOPE_OUT"); env && *env) return env;
  return "results";
}

// ---------------------------------------------------------------------------
// Figure tables.

inline const std::vector<std::string>& figure_ids() {
  static const std::vector<std::string> ids{"1D", "2D", "2E", "2F", "3B", "3C", "4B", "4D", "4F", "S-gt", "S-eta_fp"};
  return ids;
}

/// Finds `name` in the input directories; with `kind`, the JSON "kind" must match.
inline std::string find_artifact(const std::vector<fs::path>& dirs, const std::string& name,
                                 const std::string& kind = "") {
  for (const auto& d : dirs) {
    const fs::path p = d / name;
    if (!fs::exists(p)) continue;
    std::string text = read_file(p);
    if (kind.empty()) return text;
    const json j = json::parse(text, nullptr, false);
    if (!j.is_discarded() && j.is_object() && j.value("kind", "") == kind) return text;
  }
  std::string where;
  for (const auto& d : dirs) where += " " + d.string();
  throw Error(Errc::MissingArtifact,
              name + (kind.empty() ? "" : " (" + kind + ")") + " not found in:" + (where.empty() ? " <none>" : where));
}

namespace detail {

using fock::RVector;

inline std::string figure_prep(const CampaignConfig& cfg) {
  std::string s = "alpha_sq,n,p_prepared,p_ideal\n";
  for (double a2 : cfg.calibration.alpha_sq) {
    const double alpha = std::sqrt(a2);
    const auto prep = ms::prepare_compass_ensemble(alpha, cfg.device);
    const RVector p = prep.rho.populations();
    const RVector q = fock::cat_state({alpha, 4, 0}, prep.rho.dim()).populations();
    for (Eigen::Index n = 0; n < p.size(); ++n)
      s += num(a2) + ',' + std::to_string(n) + ',' + num(p(n)) + ',' + num(q(n)) + '\n';
  }
  return s;
}

inline std::vector<std::pair<json, ms::ReadoutRecord>> calibration_records(const std::vector<fs::path>& dirs) {
  const std::string text = find_artifact(dirs, "records.jsonl");
  std::vector<std::pair<json, ms::ReadoutRecord>> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (j.value("stage", "") != "calibrate") continue;
    ms::ReadoutRecord r;
    for (char c : j.at("symbols").get<std::string>()) r.symbols.push_back(ms::parse_symbol(c));
    r.trial_id = j.at("trial_id").get<std::uint64_t>();
    out.emplace_back(std::move(j), std::move(r));
  }
  require(!out.empty(), Errc::MissingArtifact, "records.jsonl holds no calibration records");
  return out;
}

inline std::string figure_lambda_hist(const CampaignConfig& cfg, const std::vector<fs::path>& dirs) {
  const auto recs = calibration_records(dirs);
  std::map<std::pair<std::string, double>, std::vector<long long>> hist;
  std::map<std::string, LambdaCache> caches;
  const int lo = -12, hi = 12;  // log10 edges, step 0.5; first and last bins are open
  const int nb = 2 * (hi - lo) + 2;
  for (const auto& [tag, r] : recs) {
    if (r.has_leakage()) continue;
    const std::string probe = tag.at("probe").get<std::string>();
    auto it = caches.find(probe);
    if (it == caches.end()) {
      const bool vac = probe == "vacuum";
      const double a2 = vac ? 1.0 : std::stod(probe.substr(7));
      it = caches.emplace(probe, make_cache(cfg, vac ? ms::ProbeMode::Vacuum : ms::ProbeMode::Compass, a2)).first;
    }
    const double l = it->second(r);
    auto& h = hist[{probe, tag.at("n_inj").get<double>()}];
    h.resize(static_cast<std::size_t>(nb), 0);
    int k = 0;
    if (l > 0.0) k = std::clamp(static_cast<int>(std::floor(2.0 * (std::log10(l) - lo))) + 1, 1, nb - 1);
    if (std::isinf(l)) k = nb - 1;
    ++h[static_cast<std::size_t>(k)];
  }
  std::string s = "probe,n_inj,log10_lambda_lo,log10_lambda_hi,count\n";
  for (const auto& [key, h] : hist)
    for (int k = 0; k < nb; ++k) {
      const double a = k == 0 ? -INFINITY : lo + 0.5 * (k - 1);
      const double b = k == 0 ? lo : (k == nb - 1 ? INFINITY : a + 0.5);
      s += key.first + ',' + num(key.second) + ',' + num(a) + ',' + num(b) + ',' +
           std::to_string(h[static_cast<std::size_t>(k)]) + '\n';
    }
  return s;
}

inline std::string figure_eta_fp(const CampaignConfig& cfg, const std::vector<fs::path>& dirs) {
  const auto recs = calibration_records(dirs);
  double a2 = 0.0;
  for (const auto& [tag, r] : recs) {
    const std::string probe = tag.at("probe").get<std::string>();
    if (probe != "vacuum") a2 = std::max(a2, std::stod(probe.substr(7)));
  }
  require(a2 > 0.0, Errc::MissingArtifact, "no compass calibration records");
  const std::string label = probe_label(ms::ProbeMode::Compass, a2);
  LambdaCache cache = make_cache(cfg, ms::ProbeMode::Compass, a2);
  std::map<double, an::CalibrationSet> sets;
  for (const auto& [tag, r] : recs) {
    if (tag.at("probe") != label || r.has_leakage()) continue;
    const double n = tag.at("n_inj").get<double>();
    auto& set = sets[n];
    set.n_inj = n;
    set.lambdas.push_back(cache(r));
  }
  std::vector<an::CalibrationSet> v;
  for (auto& [n, s] : sets) v.push_back(std::move(s));
  std::vector<double> thresholds;
  for (int k = 0; k <= 16; ++k) thresholds.push_back(std::pow(10.0, 0.25 * k));
  const auto rows = an::threshold_sweep(v, a2, thresholds);
  std::string s = "threshold,eta,delta,delta_over_eta\n";
  for (const auto& r : rows) s += num(r.threshold) + ',' + num(r.eta) + ',' + num(r.delta) + ',' + num(r.ratio) + '\n';
  return s;
}

}  // namespace detail

/// CSV text for one figure id.
inline std::string figure_table(const std::string& id, const CampaignConfig& cfg, const std::vector<fs::path>& dirs) {
  const auto& ids = figure_ids();
  if (std::find(ids.begin(), ids.end(), id) == ids.end()) {
    std::string valid;
    for (const auto& v : ids) valid += (valid.empty() ? "" : ", ") + v;
    throw Error(Errc::InvalidArgument, "unknown figure id '" + id + "'; valid ids: " + valid);
  }
  const double tp = 2.0 * std::numbers::pi;
  if (id == "1D") return detail::figure_prep(cfg);
  if (id == "2D") return detail::figure_lambda_hist(cfg, dirs);
  if (id == "S-eta_fp") return detail::figure_eta_fp(cfg, dirs);
  if (id == "S-gt") {
    const double tdm = config::tau_dm(cfg);
    std::vector<double> times;
    for (int k = 0; k <= 60; ++k) times.push_back(tdm / 100.0 * std::pow(2000.0, k / 60.0));
    std::ostringstream os;
    dm::write_g_csv(os, times, cfg.point, cfg.halo);
    return os.str();
  }
  if (id == "4B") {
    std::string s = "detuning_Hz,shift_Hz,shift_exact_Hz\n";
    dm::TuningDrive drive;
    for (int k = 0; k <= 20; ++k) {
      drive.detuning = tp * 1e6 * (1.0 + 0.5 * k);
      const double exact = 0.5 * (std::hypot(drive.detuning, drive.rabi) - drive.detuning);
      s += num(drive.detuning / tp) + ',' + num(dm::tuned_shift(drive) / tp) + ',' + num(exact / tp) + '\n';
    }
    return s;
  }
  if (id == "2E" || id == "2F") {
    const auto rep = calibration_from_json(json::parse(find_artifact(dirs, "calibration.json", "calibration")));
    if (id == "2F") return enhancement_csv(rep);
    std::string s = "probe,alpha_sq,n_inj,k_pos,n_trials,n_meas,n_model\n";
    for (const auto& p : rep.probes)
      for (const auto& q : p.points)
        s += p.label + ',' + num(p.alpha_sq) + ',' + num(q.n_inj) + ',' + std::to_string(q.k_pos) + ',' +
             std::to_string(q.n_trials) + ',' + num(static_cast<double>(q.k_pos) / static_cast<double>(q.n_trials)) +
             ',' + num(p.fit.value("eta") * p.alpha_sq * q.n_inj + p.fit.value("delta")) + '\n';
    return s;
  }
  if (id == "3B" || id == "3C") {
    const json j = json::parse(find_artifact(dirs, "fit.json", "search"));
    const auto global = an::fit_from_json(j.at("fit"));
    std::string s = id == "3B" ? "probe,alpha_sq,tau,k_pos,n_trials,n_meas,n_model\n"
                               : "probe,alpha_sq,epsilon0,sigma_eps,eps90\n";
    for (const auto& sr : j.at("series")) {
      const std::string label = sr.at("label").get<std::string>();
      const double a2 = sr.at("alpha_sq").get<double>();
      if (id == "3C") {
        const auto& l = sr.at("limit");
        s += label + ',' + num(a2) + ',' + num(l.at("epsilon0").get<double>()) + ',' +
             num(l.at("sigma_eps").get<double>()) + ',' + num(l.at("eps90").get<double>()) + '\n';
        continue;
      }
      const double eta = sr.at("eta").get<double>();
      const auto tau = sr.at("tau").get<std::vector<double>>();
      const auto g = sr.at("g").get<std::vector<double>>();
      const auto k = sr.at("k_pos").get<std::vector<long long>>();
      const auto n = sr.at("n_trials").get<std::vector<long long>>();
      for (std::size_t i = 0; i < tau.size(); ++i) {
        const double model = global.value("a0") * eta * a2 * g[i] + global.value("b_" + label) * tau[i] +
                             global.value("c_" + label);
        s += label + ',' + num(a2) + ',' + num(tau[i]) + ',' + std::to_string(k[i]) + ',' + std::to_string(n[i]) +
             ',' + num(static_cast<double>(k[i]) / static_cast<double>(n[i])) + ',' + num(model) + '\n';
      }
    }
    if (id == "3C") {
      const auto& l = j.at("limit");
      s += std::string("global,,") + num(l.at("epsilon0").get<double>()) + ',' + num(l.at("sigma_eps").get<double>()) +
           ',' + num(l.at("eps90").get<double>()) + '\n';
    }
    return s;
  }
  // 4D, 4F
  const json j = json::parse(find_artifact(dirs, "fit.json", "scan"));
  std::string s = id == "4D" ? "bin,omega_c_Hz,eta,delta,n_meas,n_trials\n" : "m_dm_Hz,eps90,p,sigma_p\n";
  int i = 0;
  for (const auto& b : j.at("bins")) {
    if (id == "4D")
      s += std::to_string(i++) + ',' + num(b.at("omega_c").get<double>() / tp) + ',' + num(b.at("eta").get<double>()) +
           ',' + num(b.at("delta").get<double>()) + ',' + std::to_string(b.at("n_meas").get<long long>()) + ',' +
           std::to_string(b.at("n_trials").get<long long>()) + '\n';
    else
      s += num(b.at("m_dm").get<double>() / tp) + ',' + num(b.at("eps90").get<double>()) + ',' +
           num(b.at("p").get<double>()) + ',' + num(b.at("sigma_p").get<double>()) + '\n';
  }
  return s;
}

// ---------------------------------------------------------------------------
// Commands.

struct Invocation {
  std::string command;  // calibrate | search | tune-scan | figures
  CampaignConfig config;
  config::SourceMap sources;
  fs::path out_root = "results";
  bool self_calibrate = false;
  std::optional<fs::path> calibration;  // calibration.json or a run directory holding one
  std::vector<fs::path> from;           // figure inputs
  std::vector<std::string> figures;
};

struct Outcome {
  fs::path dir;
  std::string hash;
};

inline CalibrationReport load_calibration(const fs::path& p) {
  const fs::path file = fs::is_directory(p) ? p / "calibration.json" : p;
  if (!fs::exists(file)) throw Error(Errc::MissingCalibration, "no calibration at '" + file.string() + "'");
  const json j = json::parse(read_file(file), nullptr, false);
  require(!j.is_discarded(), Errc::MissingCalibration, "'" + file.string() + "' is not JSON");
  return calibration_from_json(j);
}

/// Hash of the command, canonical config text and input artifacts.
inline std::string run_hash(const Invocation& inv) {
  std::string text = inv.command + "\n" + config::to_yaml(inv.config);
  if (inv.self_calibrate) text += "self-calibrate\n";
  if (inv.calibration) {
    const fs::path file = fs::is_directory(*inv.calibration) ? *inv.calibration / "calibration.json" : *inv.calibration;
    if (fs::exists(file)) text += "calibration " + hex64(rng::fnv1a(read_file(file))) + "\n";
  }
  for (const auto& f : inv.figures) text += "figure " + f + "\n";
  for (const auto& d : inv.from)
    if (fs::exists(d / "manifest.json")) text += "from " + hex64(rng::fnv1a(read_file(d / "manifest.json"))) + "\n";
  return hex64(rng::fnv1a(text));
}

/// Runs one command into `sink`; returns the manifest body (no file registry).
inline json run_command(const Invocation& inv, Sink& sink) {
  const CampaignConfig& cfg = inv.config;
  config::validate(cfg, inv.sources);
  std::string records;
  std::string* rec = cfg.write_records ? &records : nullptr;
  sink.put("config.yaml", config::to_yaml(cfg));
  const auto need_calibration = [&]() -> CalibrationReport {
    if (inv.self_calibrate) {
      auto rep = run_calibration(cfg, rec);
      sink.put("calibration.json", to_json(rep).dump(2) + "\n");
      return rep;
    }
    if (!inv.calibration)
      throw Error(Errc::MissingCalibration, inv.command + " needs --calibration <path> or --self-calibrate");
    return load_calibration(*inv.calibration);
  };
  if (inv.command == "calibrate") {
    const auto rep = run_calibration(cfg, rec);
    sink.put("calibration.json", to_json(rep).dump(2) + "\n");
    sink.put("calibration.csv", calibration_csv(rep));
    sink.put("enhancement.csv", enhancement_csv(rep));
  } else if (inv.command == "search") {
    const auto cal = need_calibration();
    const auto rep = run_search(cfg, cal, rec);
    sink.put("search.csv", search_csv(rep));
    sink.put("fit.json", to_json(rep).dump(2) + "\n");
    sink.put("limits.csv", limits_csv(rep.offres));
  } else if (inv.command == "tune-scan") {
    const auto cal = need_calibration();
    const auto rep = run_scan(cfg, cal, rec);
    sink.put("scan.csv", scan_csv(rep));
    sink.put("fit.json", to_json(rep).dump(2) + "\n");
    sink.put("limits.csv", limits_csv(scan_limits(rep)));
  } else if (inv.command == "figures") {
    require(!inv.figures.empty(), Errc::InvalidArgument, "figures needs at least one figure id");
    for (const auto& id : inv.figures) sink.put("fig_" + id + ".csv", figure_table(id, cfg, inv.from));
  } else {
    throw Error(Errc::InvalidArgument, "unknown command '" + inv.command + "'");
  }
  if (rec && inv.command != "figures") sink.put("records.jsonl", records);
  json inputs = json::array();
  for (const auto& d : inv.from) inputs.push_back(d.filename().string());
  return {{"command", inv.command},
          {"config_hash", hex64(rng::fnv1a(config::to_yaml(cfg)))},
          {"inputs", inputs},
          {"module_versions", module_versions()},
          {"run_hash", run_hash(inv)},
          {"seed", cfg.master_seed},
          {"tool_version", kToolVersion}};
}

/// Staged execution: results/<hash> on success, quarantine/<hash>.N on failure (rethrows).
inline Outcome execute(const Invocation& inv) {
  config::validate(inv.config, inv.sources);
  Outcome out;
  out.hash = run_hash(inv);
  const auto t0 = std::chrono::steady_clock::now();
  StagedRun run(inv.out_root, out.hash);
  json manifest;
  try {
    manifest = run_command(inv, run);
  } catch (const std::exception& e) {
    const fs::path q = run.quarantine(e.what());
    warn("partial outputs moved to " + q.string());
    throw;
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.dir = run.commit(manifest, wall);
  return out;
}

}  // namespace catscope::pipeline
