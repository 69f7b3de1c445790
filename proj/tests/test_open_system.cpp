#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "catscope/fock.hpp"
#include "catscope/open_system.hpp"

namespace fock = catscope::fock;
namespace os = catscope::open_system;
using catscope::Errc;
using fock::cplx;

namespace {

template <typename F>
Errc error_code(F&& f) {
  try {
    f();
  } catch (const catscope::Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected catscope::Error";
  return Errc::InvalidArgument;
}

fock::DensityMatrix cat_density(double x, int j, int dim) {
  return fock::cat_state({cplx(std::sqrt(x), 0.0), 4, j}, dim).density();
}

}  // namespace

TEST(Lindblad, CoherentStateDecaysToSmallerCoherentState) {
  const cplx alpha(2.0, 0.5);
  const int dim = 40;
  const auto rho0 = fock::coherent_state(alpha, dim).density();
  const auto res = os::lindblad_evolve(rho0, {1.0, 0.0}, 0.2);
  const auto target = fock::coherent_state(alpha * std::exp(-0.1), dim);
  EXPECT_GT(res.rho_t.fidelity(target), 1.0 - 1e-6);
  EXPECT_GT(res.steps, 0);
}

TEST(Lindblad, ZeroTimeIsIdentity) {
  const auto rho0 = cat_density(4.0, 1, 30);
  const auto res = os::lindblad_evolve(rho0, {1.0, 0.0}, 0.0);
  EXPECT_LT((res.rho_t.matrix() - rho0.matrix()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Lindblad, MeanPhotonNumberDecaysExponentially) {
  const auto rho0 = cat_density(10.0, 0, 45);
  const double n0 = rho0.mean_photon_number();
  const auto traj = os::lindblad_trajectory(rho0, {1.0, 0.0}, {0.1, 0.5, 1.0});
  for (const auto& r : traj) {
    EXPECT_NEAR(r.rho_t.mean_photon_number(), n0 * std::exp(-r.t), 1e-6) << r.t;
    EXPECT_NEAR(r.rho_t.matrix().trace().real(), 1.0, 1e-7);
    EXPECT_GT(r.rho_t.min_eigenvalue(), -1e-6);
  }
}

TEST(Lindblad, HeatingPreservesTrace) {
  const auto rho0 = fock::StateVector::fock(0, 20).density();
  const auto res = os::lindblad_evolve(rho0, {1.0, 0.05}, 1.0);
  EXPECT_NEAR(res.rho_t.matrix().trace().real(), 1.0, 1e-7);
  // loss at k, heating at k n_th: n(t) = n_th/(1-n_th) (1 - e^{-k(1-n_th)t})
  EXPECT_NEAR(res.rho_t.mean_photon_number(), 0.05 / 0.95 * (1.0 - std::exp(-0.95)), 1e-6);
}

TEST(Lindblad, InvalidChannel) {
  const auto rho0 = fock::StateVector::fock(0, 4).density();
  EXPECT_EQ(error_code([&] { os::lindblad_evolve(rho0, {-1.0, 0.0}, 1.0); }),
            Errc::InvalidArgument);
  EXPECT_EQ(error_code([&] { os::lindblad_evolve(rho0, {1.0, 0.0}, -1.0); }),
            Errc::InvalidArgument);
}

TEST(Lindblad, TraceDistanceToVacuumIsMonotone) {
  const int dim = 30;
  const auto rho0 = cat_density(4.0, 2, dim);
  const auto vac = fock::StateVector::fock(0, dim).density();
  std::vector<double> times;
  for (int k = 1; k <= 12; ++k) times.push_back(0.25 * k);
  const auto traj = os::lindblad_trajectory(rho0, {1.0, 0.0}, times);
  double prev = os::trace_distance(rho0, vac);
  for (const auto& r : traj) {
    const double d = os::trace_distance(r.rho_t, vac);
    EXPECT_LE(d, prev + 1e-9);
    prev = d;
  }
}

TEST(CatTransition, ClosedFormMatchesLindblad) {
  for (double x : {4.0, 10.0}) {
    const int dim = fock::recommended_dim(std::sqrt(x)) + 6;
    std::vector<fock::DensityMatrix> cats;
    for (int j = 0; j < 4; ++j) cats.push_back(cat_density(x, j, dim));
    for (int j = 0; j < 4; ++j) {
      const auto traj = os::lindblad_trajectory(cats[j], {1.0, 0.0}, {0.01, 0.1, 0.5});
      for (const auto& r : traj) {
        for (int l = 0; l < 4; ++l) {
          const double numeric = r.rho_t.overlap(cats[l]);
          const double closed = os::cat_transition_probability(4, j, l, std::sqrt(x), 1.0, r.t);
          EXPECT_NEAR(closed, numeric, 1e-6) << "x=" << x << " j=" << j << " l=" << l
                                             << " t=" << r.t;
        }
      }
    }
  }
}

TEST(CatTransition, IdentityAtZeroTime) {
  for (int j = 0; j < 4; ++j)
    EXPECT_NEAR(os::cat_transition_probability(4, j, j, std::sqrt(10.0), 1.0, 0.0), 1.0, 1e-12);
  EXPECT_NEAR(os::cat_transition_probability(4, 0, 1, std::sqrt(10.0), 1.0, 0.0), 0.0, 1e-12);
}

TEST(CatTransition, ReducedLifetimeLaw) {
  const double x = 10.0;
  for (double xkt : {0.002, 0.005, 0.01, 0.02}) {
    const double p00 = os::cat_transition_probability(4, 0, 0, std::sqrt(x), 1.0, xkt / x);
    EXPECT_NEAR((1.0 - p00) / xkt, 1.0, 0.03) << xkt;
  }
}

TEST(CatTransition, CubicUpwardJump) {
  const double x = 10.0;
  for (double xkt : {0.01, 0.02, 0.05}) {
    const double p01 = os::cat_transition_probability(4, 0, 1, std::sqrt(x), 1.0, xkt / x);
    EXPECT_NEAR(p01 / (xkt * xkt * xkt / 6.0), 1.0, 0.10) << xkt;
  }
}

TEST(CatTransition, CubicJumpAgreesWithLindblad) {
  const double x = 10.0;
  const int dim = 48;
  const auto rho0 = cat_density(x, 0, dim);
  const auto phi1 = cat_density(x, 1, dim);
  const auto res = os::lindblad_evolve(rho0, {1.0, 0.0}, 0.005);
  EXPECT_NEAR(res.rho_t.overlap(phi1),
              os::cat_transition_probability(4, 0, 1, std::sqrt(x), 1.0, 0.005), 1e-6);
}

TEST(CatTransition, ClosureOverSectors) {
  const double x = 10.0;
  const int dim = 48;
  const auto rho0 = cat_density(x, 0, dim);
  for (double t : {0.05, 0.2, 0.5}) {
    const auto res = os::lindblad_evolve(rho0, {1.0, 0.0}, t);
    const auto sectors = fock::sector_populations(res.rho_t.populations(), 4);
    EXPECT_NEAR(sectors.sum(), 1.0, 1e-6);
    double total = 0.0;
    for (int l = 0; l < 4; ++l) {
      const double p = os::cat_transition_probability(4, 0, l, std::sqrt(x), 1.0, t);
      EXPECT_LE(p, sectors(l) + 1e-9);
      total += p;
    }
    EXPECT_LE(total, 1.0 + 1e-6);
  }
}

TEST(CatTransition, LargeAlphaFormApproachesExact) {
  const double exact = os::cat_transition_probability(4, 0, 3, std::sqrt(12.0), 1.0, 0.01);
  const double approx = os::cat_transition_probability_large_alpha(4, 0, 3, std::sqrt(12.0), 1.0, 0.01);
  EXPECT_NEAR(approx / exact, 1.0, 0.05);
}

TEST(CatTransition, InvalidIndex) {
  EXPECT_EQ(error_code([] { os::cat_transition_probability(4, 4, 0, 2.0, 1.0, 0.1); }),
            Errc::InvalidIndex);
  EXPECT_EQ(error_code([] { os::cat_transition_probability(1, 0, 0, 2.0, 1.0, 0.1); }),
            Errc::InvalidIndex);
}

TEST(CatTransition, CsvRows) {
  std::ostringstream out;
  os::write_transition_csv(out, 4, 2.0, 1.0, {0.0, 0.1});
  const std::string text = out.str();
  EXPECT_EQ(text.rfind("t,j,l,p\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 33);
}

TEST(EffectiveLifetime, Values) {
  EXPECT_NEAR(os::effective_lifetime(std::sqrt(12.0), 4.6e-3), 383.333e-6, 1e-9);
  EXPECT_DOUBLE_EQ(os::effective_lifetime(1.0, 4.6e-3), 4.6e-3);
  EXPECT_NEAR(os::effective_lifetime(2.0, 1.0) / os::effective_lifetime(std::sqrt(8.0), 1.0), 2.0,
              1e-12);
  EXPECT_EQ(error_code([] { os::effective_lifetime(0.0, 1.0); }), Errc::ZeroAmplitude);
}
