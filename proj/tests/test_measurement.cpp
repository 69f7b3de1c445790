#include <gtest/gtest.h>

#include <cmath>

#include "catscope/measurement.hpp"

namespace ms = catscope::measurement;
namespace fock = catscope::fock;
using catscope::Errc;

namespace {

ms::DeviceParams noiseless() { return ms::DeviceParams::ideal(); }

ms::TrialPlan forced_plan(int sector, const ms::DeviceParams& d, int repeats = 20) {
  ms::TrialConfig cfg;
  cfg.repeats = repeats;
  ms::TrialPlan plan = ms::make_plan(cfg, d);
  plan.initial = fock::RVector::Zero(plan.sectors);
  plan.initial(sector) = 1.0;
  return plan;
}

}  // namespace

TEST(Transitions, RowsSumToOne) {
  const ms::DeviceParams d;
  for (auto mode : {ms::ProbeMode::Compass, ms::ProbeMode::Vacuum}) {
    const auto T = ms::build_transition_matrix(d, 12.0, mode);
    for (Eigen::Index r = 0; r < T.rows(); ++r) EXPECT_NEAR(T.row(r).sum(), 1.0, 1e-12);
    EXPECT_GE(T.minCoeff(), 0.0);
  }
  ms::TrialConfig cfg;
  const auto plan = ms::make_plan(cfg, d);
  for (Eigen::Index r = 0; r < plan.step.rows(); ++r) EXPECT_NEAR(plan.step.row(r).sum(), 1.0, 1e-12);
}

TEST(Transitions, LossAndHeating) {
  ms::DeviceParams d;
  const auto P = ms::cavity_transitions(d, 12.0, ms::ProbeMode::Compass);
  EXPECT_NEAR(P(1, 0), 4.944e-3, 1e-6);
  EXPECT_NEAR(P(0, 3), 4.944e-3, 1e-6);
  EXPECT_NEAR(P(0, 1), 1e-4 * P(1, 0), 1e-15);
  d.n_c = 0.0;
  const auto T = ms::build_transition_matrix(d, 12.0, ms::ProbeMode::Compass);
  for (int q = 0; q < 2; ++q)
    for (int q2 = 0; q2 < 2; ++q2) EXPECT_EQ(T(2 * 0 + q, 2 * 1 + q2), 0.0);
  d.t_m = 1e-15;
  const auto I = ms::cavity_transitions(d, 12.0, ms::ProbeMode::Compass);
  EXPECT_LT((I - fock::RMatrix::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Transitions, ParitySemantics) {
  const auto T = ms::build_transition_matrix(noiseless(), 12.0, ms::ProbeMode::Compass);
  // phi1 flips, phi3 keeps, phi0/phi2 randomize
  EXPECT_EQ(T(2, 3), 1.0);
  EXPECT_EQ(T(3, 2), 1.0);
  EXPECT_EQ(T(6, 6), 1.0);
  EXPECT_EQ(T(7, 7), 1.0);
  EXPECT_EQ(T(0, 0), 0.5);
  EXPECT_EQ(T(0, 1), 0.5);
  EXPECT_EQ(T(5, 4), 0.5);
}

TEST(Emission, Structure) {
  ms::DeviceParams d;
  d.readout_Fge = d.readout_Fge_inv = 0.01;
  const auto E = ms::build_emission_matrix(d, ms::ProbeMode::Compass);
  for (Eigen::Index r = 0; r < E.rows(); ++r) EXPECT_NEAR(E.row(r).sum(), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(E(0, 0), 0.99);
  EXPECT_DOUBLE_EQ(E(1, 1), 0.99);
  const auto V = ms::build_emission_matrix(d, ms::ProbeMode::Vacuum);
  EXPECT_LT((2.0 * V - E.topRows(4)).cwiseAbs().maxCoeff(), 1e-15);
  const auto P = ms::build_emission_matrix(noiseless(), ms::ProbeMode::Compass);
  EXPECT_EQ(P(0, 0), 1.0);
  EXPECT_EQ(P(1, 1), 1.0);
}

TEST(Prep, IdealMatchesCompass) {
  const double alpha = std::sqrt(10.0);
  const auto r = ms::prepare_compass_ensemble(alpha, noiseless());
  const auto ideal = fock::cat_state({alpha, 4, 0}, r.rho.dim());
  EXPECT_GT(r.rho.fidelity(ideal), 1.0 - 1e-6);
  EXPECT_GT(r.success_probability, 0.2);
  EXPECT_LT(r.success_probability, 0.3);
}

TEST(Prep, VacuumLimit) {
  const auto r = ms::prepare_compass_ensemble(0.0, noiseless());
  EXPECT_NEAR(r.success_probability, 1.0, 1e-12);
  EXPECT_NEAR(r.rho.populations()(0), 1.0, 1e-12);
}

TEST(Prep, DefaultDeviceFidelity) {
  const double alpha = std::sqrt(12.0);
  const auto r = ms::prepare_compass_ensemble(alpha, ms::DeviceParams{});
  const auto ideal = fock::cat_state({alpha, 4, 0}, r.rho.dim());
  const double f = fock::population_fidelity(r.rho.populations(), ideal.populations());
  EXPECT_GE(f, 0.88);
  EXPECT_LT(f, 1.0);
  catscope::rng::Rng rng(7);
  int ok = 0;
  for (int i = 0; i < 200; ++i) ok += ms::prepare_compass(alpha, ms::DeviceParams{}, rng).success;
  EXPECT_NEAR(ok / 200.0, r.success_probability, 0.15);
}

TEST(Records, NoiselessPatterns) {
  const auto d = noiseless();
  const auto r1 = ms::simulate_with_plan(forced_plan(1, d), 11, 0);
  for (std::size_t k = 1; k < r1.symbols.size(); ++k) EXPECT_NE(r1.symbols[k], r1.symbols[k - 1]);
  EXPECT_EQ(r1.symbol_string().substr(0, 4), "EGEG");
  const auto r3 = ms::simulate_with_plan(forced_plan(3, d), 11, 0);
  EXPECT_EQ(r3.symbol_string(), std::string(20, 'G'));
  EXPECT_FALSE(r1.has_leakage());
}

TEST(Records, FairCoinFromEvenSector) {
  const auto plan = forced_plan(0, noiseless(), 1000);
  long long flips = 0, steps = 0;
  for (int i = 0; i < 120; ++i) {
    const auto r = ms::simulate_with_plan(plan, catscope::rng::derive_seed(5, "coin", i), i);
    for (std::size_t k = 1; k < r.symbols.size(); ++k, ++steps) flips += r.symbols[k] != r.symbols[k - 1];
  }
  ASSERT_GE(steps, 100000);
  const double sigma = std::sqrt(0.25 / steps);
  EXPECT_NEAR(static_cast<double>(flips) / steps, 0.5, 5.0 * sigma);
}

TEST(Records, LeakageRate) {
  ms::DeviceParams d;
  ms::TrialConfig cfg;
  cfg.rng_seed = 3;
  const auto res = ms::run_campaign(20000, cfg, d);
  long long leaky = 0;
  for (const auto& r : res.records) leaky += r.has_leakage();
  const double p = 1.0 - std::pow(1.0 - 0.002, 20);
  EXPECT_NEAR(p, 0.0392, 1e-4);
  EXPECT_NEAR(static_cast<double>(leaky) / 20000, p, 3.0 * std::sqrt(p * (1 - p) / 20000));
  d.p_leak = 0.0;
  const auto clean = ms::run_campaign(2000, cfg, d);
  for (const auto& r : clean.records) EXPECT_FALSE(r.has_leakage());
}

TEST(Campaign, DeterministicAcrossWorkers) {
  ms::TrialConfig cfg;
  cfg.rng_seed = 99;
  cfg.injected_beta = fock::cplx(0.1, 0.0);
  const ms::DeviceParams d;
  const auto a = ms::run_campaign(3000, cfg, d, 1);
  const auto b = ms::run_campaign(3000, cfg, d, 4);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].symbols, b.records[i].symbols);
    EXPECT_EQ(a.records[i].truth->measured_sector, b.records[i].truth->measured_sector);
  }
  EXPECT_EQ(a.injected_count, b.injected_count);
  cfg.rng_seed = 100;
  const auto c = ms::run_campaign(3000, cfg, d, 1);
  int same = 0;
  for (std::size_t i = 0; i < a.records.size(); ++i) same += a.records[i].symbols == c.records[i].symbols;
  EXPECT_LT(same, 3000);
}

TEST(Campaign, MimicInjectionMatchesOverlap) {
  const double alpha = std::sqrt(12.0);
  const fock::cplx beta(0.08, 0.0);
  const int dim = fock::recommended_dim(alpha + 0.08) + 8;
  const auto phi0 = fock::cat_state({alpha, 4, 0}, dim);
  const auto phi1 = fock::cat_state({alpha, 4, 1}, dim);
  const double p = fock::transition_probability(phi1, fock::displacement_operator(beta, dim), phi0);
  ms::TrialConfig cfg;
  cfg.rng_seed = 21;
  cfg.injected_beta = beta;
  auto d = noiseless();
  const auto res = ms::run_campaign(20000, cfg, d);
  long long hits = 0;
  for (const auto& r : res.records)
    hits += r.truth->prepared_sector == 0 && r.truth->measured_sector == 1;
  const double n = 20000;
  EXPECT_NEAR(hits / n, p, 3.0 * std::sqrt(p * (1 - p) / n));
}

TEST(Campaign, DmInjectionRate) {
  ms::TrialConfig cfg;
  cfg.rng_seed = 8;
  cfg.tau = 100e-6;
  ms::DmInjection inj;
  inj.point = catscope::dm::on_peak(2.0 * std::numbers::pi * 6.442e9, inj.halo);
  inj.epsilon = 1.5e-15;
  cfg.dm = inj;
  const auto d = noiseless();
  const auto res = ms::run_campaign(10000, cfg, d);
  const double p = res.plan.dm_probability;
  ASSERT_GT(p, 0.01);
  ASSERT_LT(p, 0.5);
  const double rate = static_cast<double>(res.injected_count) / 10000;
  EXPECT_NEAR(rate, p, 3.0 * std::sqrt(p * (1 - p) / 10000));
}

TEST(Config, Validation) {
  ms::TrialConfig cfg;
  cfg.injected_beta = fock::cplx(0.1);
  cfg.dm = ms::DmInjection{};
  EXPECT_THROW(cfg.validate(), catscope::Error);
  ms::TrialConfig bad;
  bad.repeats = 0;
  EXPECT_THROW(bad.validate(), catscope::Error);
  EXPECT_THROW(ms::parse_mode("squeezed"), catscope::Error);
  EXPECT_EQ(ms::parse_symbol('L'), ms::kLeak);
  EXPECT_THROW(ms::parse_symbol('x'), catscope::Error);
}
