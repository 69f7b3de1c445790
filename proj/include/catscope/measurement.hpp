#pragma once

// Monte-Carlo generator of repeated-parity readout records: filter-based
// compass preparation, signal injection, background sector dynamics during
// integration, and M noisy QND parity readouts with demolition and leakage.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "catscope/dm_model.hpp"
#include "catscope/error.hpp"
#include "catscope/fock.hpp"
#include "catscope/open_system.hpp"
#include "catscope/rng.hpp"

namespace catscope::measurement {

using fock::cplx;
using fock::RMatrix;
using fock::RVector;

enum class ProbeMode { Compass, Vacuum };

inline std::string to_string(ProbeMode m) { return m == ProbeMode::Compass ? "compass" : "vacuum"; }

inline ProbeMode parse_mode(const std::string& s) {
  if (s == "compass") return ProbeMode::Compass;
  if (s == "vacuum") return ProbeMode::Vacuum;
  throw Error(Errc::InvalidMode, "unknown probe mode '" + s + "'");
}

/// Number of cavity sectors tracked by the hidden-state model.
inline int sector_count(ProbeMode m) { return m == ProbeMode::Compass ? 4 : 2; }

struct DeviceParams {
  double omega_c = 2.0 * std::numbers::pi * 6.442e9;
  double chi = 2.0 * std::numbers::pi * 0.6e6;
  double T1c = 4.6e-3;
  double T1q = 175.3e-6;
  double T2q = 119.4e-6;
  double n_c = 1e-4;
  double n_q = 0.013;
  double t_m = 1.9e-6;
  double readout_Fge = 0.02;      // e read as G
  double readout_Fge_inv = 0.01;  // g read as E
  double p_d = 0.013;
  double p_leak = 0.002;

  bool operator==(const DeviceParams&) const = default;

  /// Ramsey wait time for mod-4 parity, pi / (2 chi).
  double t_p() const { return std::numbers::pi / (2.0 * chi); }

  void validate() const {
    const auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    require(omega_c > 0.0 && chi > 0.0 && T1c > 0.0 && T1q > 0.0 && T2q > 0.0 && t_m > 0.0,
            Errc::InvalidArgument, "device frequencies and times must be positive");
    require(n_c >= 0.0 && n_q >= 0.0, Errc::InvalidArgument, "thermal populations must be >= 0");
    require(prob(readout_Fge) && prob(readout_Fge_inv) && prob(p_d) && prob(p_leak),
            Errc::InvalidArgument, "device probabilities must lie in [0, 1]");
  }

  /// No decay, no thermal population, perfect readout.
  static DeviceParams ideal() {
    DeviceParams d;
    const double inf = std::numeric_limits<double>::infinity();
    d.T1c = d.T1q = d.T2q = inf;
    d.n_c = d.n_q = 0.0;
    d.readout_Fge = d.readout_Fge_inv = 0.0;
    d.p_d = d.p_leak = 0.0;
    return d;
  }
};

// ---------------------------------------------------------------------------
// Compass preparation.

struct PrepResult {
  fock::DensityMatrix rho;
  bool success = false;
  double success_probability = 0.0;
};

namespace detail {

/// Post-select the ground outcome of a Ramsey filter; `flip` is the chance
/// the reported outcome belongs to the other branch.
inline double ramsey_select(fock::CMatrix& rho, double theta, double flip) {
  const int dim = static_cast<int>(rho.rows());
  const fock::CVector keep = fock::ramsey_kraus_diagonal(theta, dim, false);
  const fock::CVector other = fock::ramsey_kraus_diagonal(theta, dim, true);
  fock::CMatrix out = (1.0 - flip) * (keep.asDiagonal() * rho * keep.conjugate().asDiagonal());
  if (flip > 0.0) out += flip * (other.asDiagonal() * rho * other.conjugate().asDiagonal());
  const double p = out.trace().real();
  require(p > 0.0, Errc::PrepFailed, "post-selection has zero probability");
  rho = out / p;
  return p;
}

/// Cavity loss and heating over one readout interval, then demolition.
inline void idle_block(fock::CMatrix& rho, const DeviceParams& d) {
  if (std::isfinite(d.T1c)) {
    const open_system::LossChannel ch{1.0 / d.T1c, d.n_c};
    rho = open_system::lindblad_evolve(fock::DensityMatrix(rho, false), ch, d.t_m).rho_t.matrix();
  }
  if (d.p_d > 0.0) {
    const fock::CMatrix a = fock::annihilation(static_cast<int>(rho.rows()));
    const fock::CMatrix jumped = a * rho * a.adjoint();
    const double w = jumped.trace().real();
    if (w > 1e-300) rho = (1.0 - d.p_d) * rho + d.p_d * jumped / w;
  }
}

}  // namespace detail

/// Deterministic conditional state after the filter sequence and the
/// probability that every post-selection succeeds.
inline PrepResult prepare_compass_ensemble(double alpha, const DeviceParams& device, int dim = 0) {
  device.validate();
  require(std::isfinite(alpha), Errc::NonFinite, "alpha not finite");
  if (dim <= 0) dim = fock::recommended_dim(std::abs(alpha)) + 4;
  fock::CMatrix rho = fock::coherent_state(alpha, dim).density().matrix();
  const double phase_err = std::isfinite(device.T2q) ? 1.0 - std::exp(-device.t_p() / device.T2q) : 0.0;
  const double flip = std::min(1.0, device.readout_Fge + phase_err);
  const double pi = std::numbers::pi;
  // Two filters (mod 2, mod 4) then three parity checks.
  const std::array<double, 5> thetas{pi, pi / 2.0, pi, pi / 2.0, pi};
  double success = 1.0;
  for (double theta : thetas) {
    success *= detail::ramsey_select(rho, theta, flip);
    detail::idle_block(rho, device);
  }
  const fock::CMatrix herm = 0.5 * (rho + rho.adjoint());
  return {fock::DensityMatrix(herm / herm.trace().real(), false), true, success};
}

/// One preparation attempt; `success` is drawn from the post-selection probability.
inline PrepResult prepare_compass(double alpha, const DeviceParams& device, rng::Rng& rng,
                                  int dim = 0) {
  PrepResult r = prepare_compass_ensemble(alpha, device, dim);
  r.success = rng.bernoulli(r.success_probability);
  return r;
}

/// Retries until success (at most `attempts` tries); throws PrepFailed otherwise.
inline PrepResult prepare_compass_retry(double alpha, const DeviceParams& device, rng::Rng& rng,
                                        int attempts = 1000) {
  const PrepResult r = prepare_compass_ensemble(alpha, device);
  for (int i = 0; i < attempts; ++i)
    if (rng.bernoulli(r.success_probability)) return r;
  throw Error(Errc::PrepFailed, "compass preparation never succeeded");
}

// ---------------------------------------------------------------------------
// Hidden-state model.

struct QubitFlips {
  double gg, ge, eg, ee;
};

inline QubitFlips qubit_flips(const DeviceParams& d) {
  const double down = std::isfinite(d.T1q) ? 1.0 - std::exp(-d.t_m / d.T1q) : 0.0;
  const double up = d.n_q * down;
  const double phase = std::isfinite(d.T2q) ? 1.0 - std::exp(-d.t_p() / d.T2q) : 0.0;
  const double ge = up + phase;
  const double eg = down + phase;
  return {1.0 - ge, ge, eg, 1.0 - eg};
}

/// Per-interval cavity sector transition matrix P_{jl}.
inline RMatrix cavity_transitions(const DeviceParams& d, double alpha_sq, ProbeMode mode) {
  const int S = sector_count(mode);
  RMatrix P = RMatrix::Zero(S, S);
  const double x = mode == ProbeMode::Compass ? alpha_sq : 1.0;
  const double loss = std::isfinite(d.T1c) ? 1.0 - std::exp(-x * d.t_m / d.T1c) : 0.0;
  const double heat = d.n_c * loss;
  if (mode == ProbeMode::Compass) {
    for (int j = 0; j < S; ++j) {
      P(j, (j + S - 1) % S) += loss;
      P(j, (j + 1) % S) += heat;
      P(j, j) += 1.0 - loss - heat;
    }
  } else {
    P(0, 1) = heat;
    P(0, 0) = 1.0 - heat;
    P(1, 0) = loss;
    P(1, 1) = 1.0 - loss;
  }
  return P;
}

/// Qubit transition factor into sector l from qubit q to q' (0 = g, 1 = e).
inline double qubit_factor(ProbeMode mode, int l, int q, int q2, const QubitFlips& f) {
  const bool random = mode == ProbeMode::Compass && (l == 0 || l == 2);
  if (random) return 0.5;
  const bool intended = l == 1 ? q2 != q : q2 == q;
  if (intended) return q == 0 ? f.gg : f.ee;
  return q == 0 ? f.ge : f.eg;
}

/// Joint transition matrix over hidden index 2 * sector + qubit built from a
/// cavity sector matrix.
inline RMatrix joint_transitions(const RMatrix& cavity, ProbeMode mode, const QubitFlips& f) {
  const int S = static_cast<int>(cavity.rows());
  RMatrix T = RMatrix::Zero(2 * S, 2 * S);
  for (int j = 0; j < S; ++j)
    for (int q = 0; q < 2; ++q)
      for (int l = 0; l < S; ++l)
        for (int q2 = 0; q2 < 2; ++q2)
          T(2 * j + q, 2 * l + q2) = cavity(j, l) * qubit_factor(mode, l, q, q2, f);
  return T;
}

/// T over {|phi_j g>, |phi_j e>} (compass, 8x8) or {|0g>,|0e>,|1g>,|1e>} (vacuum).
inline RMatrix build_transition_matrix(const DeviceParams& device, double alpha_sq,
                                       ProbeMode mode) {
  device.validate();
  require(mode != ProbeMode::Compass || alpha_sq > 0.0, Errc::InvalidArgument,
          "compass mode needs alpha_sq > 0");
  return joint_transitions(cavity_transitions(device, alpha_sq, mode), mode, qubit_flips(device));
}

/// Rows per hidden state, columns (G, E). Vacuum mode carries the overall 1/2.
inline RMatrix build_emission_matrix(const DeviceParams& device, ProbeMode mode) {
  device.validate();
  const int S = sector_count(mode);
  RMatrix E(2 * S, 2);
  for (int j = 0; j < S; ++j) {
    E(2 * j, 0) = 1.0 - device.readout_Fge_inv;
    E(2 * j, 1) = device.readout_Fge_inv;
    E(2 * j + 1, 0) = device.readout_Fge;
    E(2 * j + 1, 1) = 1.0 - device.readout_Fge;
  }
  if (mode == ProbeMode::Vacuum) E *= 0.5;
  return E;
}

// ---------------------------------------------------------------------------
// Records.

enum Symbol : std::uint8_t { kG = 0, kE = 1, kLeak = 2 };

inline char symbol_char(std::uint8_t s) { return s == kG ? 'G' : (s == kE ? 'E' : 'L'); }

inline std::uint8_t parse_symbol(char c) {
  switch (c) {
    case 'G': return kG;
    case 'E': return kE;
    case 'L': return kLeak;
  }
  throw Error(Errc::InvalidArgument, std::string("unknown readout symbol '") + c + "'");
}

struct Truth {
  int prepared_sector = 0;  // after preparation
  int measured_sector = 0;  // at the start of the readout train
  bool injected = false;    // mimic or DM injection moved the sector
};

struct ReadoutRecord {
  std::vector<std::uint8_t> symbols;
  std::uint64_t trial_id = 0;
  std::optional<Truth> truth;

  std::string symbol_string() const {
    std::string s;
    s.reserve(symbols.size());
    for (auto c : symbols) s.push_back(symbol_char(c));
    return s;
  }
  bool has_leakage() const {
    return std::find(symbols.begin(), symbols.end(), kLeak) != symbols.end();
  }
};

struct DmInjection {
  double epsilon = 0.0;
  dm::SearchPoint point;
  dm::HaloParams halo;
};

struct TrialConfig {
  ProbeMode mode = ProbeMode::Compass;
  double alpha_sq = 12.0;  // compass amplitude |alpha|^2 (ignored for vacuum)
  std::optional<cplx> injected_beta;
  std::optional<DmInjection> dm;
  double tau = 0.0;  // integration time between preparation and readout (s)
  int repeats = 20;
  std::uint64_t rng_seed = 0;
  bool demolition = true;

  void validate() const {
    require(!(injected_beta && dm), Errc::InvalidArgument,
            "trial config takes either a mimic displacement or a DM injection, not both");
    require(repeats >= 1, Errc::InvalidArgument, "repeats must be >= 1");
    require(tau >= 0.0 && std::isfinite(tau), Errc::InvalidArgument, "tau must be >= 0");
    require(mode == ProbeMode::Vacuum || alpha_sq > 0.0, Errc::InvalidArgument,
            "compass mode needs alpha_sq > 0");
  }
};

/// Everything about a trial that does not depend on its random stream.
struct TrialPlan {
  ProbeMode mode = ProbeMode::Compass;
  int sectors = 4;
  int repeats = 20;
  RVector initial;            // sector distribution after preparation
  RMatrix injection;          // sector -> sector
  double dm_probability = 0;  // sector shift +1 at the end of integration
  double rate_down = 0, rate_up = 0, tau = 0;
  RMatrix step;               // joint transition per readout interval incl. demolition
  RMatrix emission;           // normalized rows over (G, E)
  double p_leak = 0;
  double prep_fidelity = 1.0;
};

/// Mimic displacement as sector transition probabilities |<phi_l|D(beta)|phi_j>|^2,
/// remainder kept on the diagonal.
inline RMatrix injection_matrix(ProbeMode mode, double alpha_sq, cplx beta) {
  const int S = sector_count(mode);
  RMatrix Q = RMatrix::Identity(S, S);
  if (beta == cplx(0.0)) return Q;
  const double amp = mode == ProbeMode::Compass ? std::sqrt(alpha_sq) : 0.0;
  const int dim = fock::recommended_dim(amp + std::abs(beta)) + 8;
  std::vector<fock::StateVector> basis;
  for (int l = 0; l < S; ++l)
    basis.push_back(mode == ProbeMode::Compass ? fock::cat_state({amp, 4, l}, dim)
                                               : fock::StateVector::fock(l, dim));
  for (int j = 0; j < S; ++j) {
    const fock::CVector moved = fock::apply_displacement(beta, basis[j].amps());
    double off = 0.0;
    for (int l = 0; l < S; ++l) {
      if (l == j) continue;
      Q(j, l) = std::norm(basis[l].amps().dot(moved));
      off += Q(j, l);
    }
    Q(j, j) = 1.0 - off;
  }
  return Q;
}

inline TrialPlan make_plan(const TrialConfig& cfg, const DeviceParams& device) {
  cfg.validate();
  device.validate();
  TrialPlan plan;
  plan.mode = cfg.mode;
  plan.sectors = sector_count(cfg.mode);
  plan.repeats = cfg.repeats;
  plan.tau = cfg.tau;
  const int S = plan.sectors;
  const double x = cfg.mode == ProbeMode::Compass ? cfg.alpha_sq : 1.0;

  if (cfg.mode == ProbeMode::Compass) {
    const double alpha = std::sqrt(cfg.alpha_sq);
    const auto prep = prepare_compass_ensemble(alpha, device);
    plan.initial = fock::sector_populations(prep.rho.populations(), 4);
    const int dim = prep.rho.dim();
    plan.prep_fidelity = fock::population_fidelity(
        prep.rho.populations(), fock::cat_state({alpha, 4, 0}, dim).populations());
  } else {
    plan.initial = RVector(2);
    plan.initial << 1.0 - device.n_c, device.n_c;
  }

  plan.injection = cfg.injected_beta ? injection_matrix(cfg.mode, cfg.alpha_sq, *cfg.injected_beta)
                                     : RMatrix::Identity(S, S);
  if (cfg.dm) {
    plan.dm_probability = std::clamp(
        dm::excitation_probability(cfg.dm->epsilon, cfg.dm->point, cfg.dm->halo, cfg.tau, x), 0.0,
        1.0);
  }
  if (std::isfinite(device.T1c)) {
    plan.rate_down = x / device.T1c;
    plan.rate_up = device.n_c * x / device.T1c;
  }

  const QubitFlips f = qubit_flips(device);
  const RMatrix cav = cavity_transitions(device, cfg.alpha_sq, cfg.mode);
  RMatrix step = joint_transitions(cav, cfg.mode, f);
  if (cfg.demolition && device.p_d > 0.0) {
    RMatrix demolished = RMatrix::Zero(S, S);
    if (cfg.mode == ProbeMode::Compass) {
      demolished.setConstant(1.0 / S);
    } else {
      demolished.col(0).setOnes();  // extra relaxation
    }
    step = (1.0 - device.p_d) * step + device.p_d * joint_transitions(cav * demolished, cfg.mode, f);
  }
  plan.step = step;
  plan.emission = build_emission_matrix(device, cfg.mode);
  for (Eigen::Index r = 0; r < plan.emission.rows(); ++r)
    plan.emission.row(r) /= plan.emission.row(r).sum();
  plan.p_leak = device.p_leak;
  return plan;
}

namespace detail {

inline int sample_row(rng::Rng& rng, const RMatrix& m, int row) {
  thread_local std::vector<double> w;
  w.assign(m.cols(), 0.0);
  for (Eigen::Index c = 0; c < m.cols(); ++c) w[c] = m(row, c);
  return rng.categorical(w);
}

/// Background sector jumps during integration (continuous-time chain).
inline int integrate_background(rng::Rng& rng, const TrialPlan& plan, int sector) {
  const double total = plan.rate_down + plan.rate_up;
  if (total <= 0.0 || plan.tau <= 0.0) return sector;
  const int S = plan.sectors;
  double t = 0.0;
  for (;;) {
    double down = plan.rate_down, up = plan.rate_up;
    if (plan.mode == ProbeMode::Vacuum) {
      down = sector == 1 ? plan.rate_down : 0.0;
      up = sector == 0 ? plan.rate_up : 0.0;
    }
    const double rate = down + up;
    if (rate <= 0.0) return sector;
    t += rng.exponential(rate);
    if (t > plan.tau) return sector;
    if (rng.uniform() * rate < down)
      sector = (sector + S - 1) % S;
    else
      sector = (sector + 1) % S;
  }
}

}  // namespace detail

inline ReadoutRecord simulate_with_plan(const TrialPlan& plan, std::uint64_t seed,
                                        std::uint64_t trial_id) {
  rng::Rng rng(seed);
  const int S = plan.sectors;
  Truth truth;
  std::vector<double> init(plan.initial.data(), plan.initial.data() + S);
  int sector = rng.categorical(init);
  truth.prepared_sector = sector;
  sector = detail::sample_row(rng, plan.injection, sector);
  truth.injected = sector != truth.prepared_sector;
  sector = detail::integrate_background(rng, plan, sector);
  if (plan.dm_probability > 0.0 && rng.bernoulli(plan.dm_probability)) {
    const int before = sector;
    if (plan.mode == ProbeMode::Compass)
      sector = (sector + 1) % S;
    else if (sector == 0)
      sector = 1;
    truth.injected = truth.injected || sector != before;
  }
  truth.measured_sector = sector;

  ReadoutRecord rec;
  rec.trial_id = trial_id;
  rec.symbols.reserve(plan.repeats);
  int state = 2 * sector;  // qubit starts in g
  for (int k = 0; k < plan.repeats; ++k) {
    state = detail::sample_row(rng, plan.step, state);
    if (plan.p_leak > 0.0 && rng.bernoulli(plan.p_leak)) {
      rec.symbols.push_back(kLeak);
      continue;
    }
    rec.symbols.push_back(static_cast<std::uint8_t>(detail::sample_row(rng, plan.emission, state)));
  }
  rec.truth = truth;
  return rec;
}

inline ReadoutRecord simulate_record(const TrialConfig& cfg, const DeviceParams& device) {
  return simulate_with_plan(make_plan(cfg, device), cfg.rng_seed, 0);
}

struct CampaignResult {
  std::vector<ReadoutRecord> records;
  std::vector<long long> measured_sector_counts;  // truth histogram
  long long injected_count = 0;
  double prep_fidelity = 1.0;
  TrialPlan plan;
};

/// n_trials independent trials; trial i uses derive_seed(master, "trial", i),
/// so the result does not depend on `workers`.
inline CampaignResult run_campaign(long long n_trials, const TrialConfig& tmpl,
                                   const DeviceParams& device, int workers = 1) {
  require(n_trials >= 1, Errc::InvalidArgument, "n_trials must be >= 1");
  CampaignResult out;
  out.plan = make_plan(tmpl, device);
  out.prep_fidelity = out.plan.prep_fidelity;
  out.records.resize(static_cast<std::size_t>(n_trials));
  const auto run_range = [&](long long lo, long long hi) {
    for (long long i = lo; i < hi; ++i)
      out.records[i] = simulate_with_plan(
          out.plan, rng::derive_seed(tmpl.rng_seed, "trial", static_cast<std::uint64_t>(i)),
          static_cast<std::uint64_t>(i));
  };
  workers = std::max(1, std::min<int>(workers, static_cast<int>(std::min<long long>(n_trials, 64))));
  if (workers == 1) {
    run_range(0, n_trials);
  } else {
    std::vector<std::thread> pool;
    const long long chunk = (n_trials + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const long long lo = w * chunk, hi = std::min(n_trials, lo + chunk);
      if (lo < hi) pool.emplace_back(run_range, lo, hi);
    }
    for (auto& t : pool) t.join();
  }
  out.measured_sector_counts.assign(out.plan.sectors, 0);
  for (const auto& r : out.records) {
    ++out.measured_sector_counts[r.truth->measured_sector];
    out.injected_count += r.truth->injected ? 1 : 0;
  }
  return out;
}

}  // namespace catscope::measurement
