#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "catscope/dm_model.hpp"

namespace dm = catscope::dm;
using catscope::Errc;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
const double kMass = kTwoPi * 6.442e9;

double integrate(auto&& f, double a, double b, unsigned depth = 20) {
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, depth, 1e-12);
}

// Level repulsion of |1,g> and |0,f> coupled by Omega/2 at detuning Delta.
double exact_shift(double rabi, double detuning) {
  return std::copysign(1.0, detuning) *
             std::sqrt(0.25 * detuning * detuning + 0.25 * rabi * rabi) -
         0.5 * detuning;
}

}  // namespace

TEST(HaloSpeed, Normalized) {
  const dm::HaloParams halo;
  EXPECT_EQ(dm::halo_speed_pdf(0.0, halo), 0.0);
  const double total = integrate([&](double v) { return dm::halo_speed_pdf(v, halo); }, 0.0,
                                 halo.v_cut()) +
                       integrate([&](double v) { return dm::halo_speed_pdf(v, halo); },
                                 halo.v_cut(), 10.0 * halo.v_cut());
  EXPECT_NEAR(total, 1.0, 1e-6);
}

TEST(HaloSpeed, LineshapePeakSpeed) {
  // 237 km/s is where the energy lineshape peaks; the speed density itself
  // peaks higher (about 311 km/s).
  const dm::HaloParams halo;
  EXPECT_NEAR(dm::detail::peak_speed(halo), 237.0, 1.5);
  double best_v = 0.0, best = 0.0;
  for (double v = 1.0; v < 1000.0; v += 0.5) {
    if (dm::halo_speed_pdf(v, halo) > best) best = dm::halo_speed_pdf(v, halo), best_v = v;
  }
  EXPECT_NEAR(best_v, 311.0, 2.0);
}

TEST(Lineshape, ZeroBelowMass) {
  const dm::HaloParams halo;
  const dm::SearchPoint p{kMass, kMass, 4.45};
  EXPECT_EQ(dm::lineshape(0.999 * kMass, p, halo), 0.0);
  EXPECT_EQ(dm::lineshape(kMass, p, halo), 0.0);
}

TEST(Lineshape, Normalized) {
  const dm::HaloParams halo;
  const dm::SearchPoint p{kMass, kMass, 4.45};
  // omega = m (1 + u^2 / 2): d omega = m u du
  const double u_cut = halo.v_cut() / dm::kSpeedOfLight;
  const auto f = [&](double u) { return dm::lineshape(kMass * (1.0 + 0.5 * u * u), p, halo) * kMass * u; };
  const double total = integrate(f, 0.0, u_cut, 8);
  EXPECT_NEAR(total, 1.0, 1e-6);
}

TEST(Lineshape, PeakLocationAndHeight) {
  const dm::HaloParams halo;
  const dm::SearchPoint p{kMass, kMass, 4.45};
  const double xm = dm::peak_offset(halo);
  EXPECT_NEAR(xm, 3.1e-7, 0.2e-7);
  const double peak = dm::lineshape(kMass * (1.0 + xm), p, halo) * kMass;
  EXPECT_NEAR(peak / 0.98e6, 1.0, 0.02);
  for (double dx : {-0.3e-7, 0.3e-7})
    EXPECT_LT(dm::lineshape(kMass * (1.0 + xm + dx), p, halo) * kMass, peak);
}

TEST(Lineshape, ScaleCovariance) {
  const dm::HaloParams halo;
  const dm::SearchPoint p{kMass, kMass, 4.45};
  const dm::SearchPoint q{2.0 * kMass, 2.0 * kMass, 4.45};
  for (double x : {1e-7, 3e-7, 1e-6, 4e-6}) {
    const double w = kMass * (1.0 + x);
    EXPECT_NEAR(2.0 * dm::lineshape(2.0 * w, q, halo) / dm::lineshape(w, p, halo), 1.0, 1e-6);
  }
}

TEST(CoherenceTime, ReferenceValue) {
  const dm::HaloParams halo;
  const dm::SearchPoint p{kMass, kMass, 4.45};
  const double tau = dm::coherence_time(p, halo);
  EXPECT_NEAR(tau / 152e-6, 1.0, 0.02);
  EXPECT_NEAR(tau * kMass / kTwoPi / 0.98e6, 1.0, 0.02);
  const dm::SearchPoint p2{2.0 * kMass, 2.0 * kMass, 4.45};
  EXPECT_NEAR(dm::coherence_time(p2, halo) / tau, 0.5, 1e-6 * 0.5);
}

TEST(GOfT, Asymptotes) {
  const dm::HaloParams halo;
  const auto p = dm::on_peak(kMass, halo);
  const double tau = dm::coherence_time(p, halo);
  EXPECT_EQ(dm::g_of_t(0.0, p, halo), 0.0);
  const double t_short = tau / 100.0;
  EXPECT_NEAR(dm::g_of_t(t_short, p, halo) / (t_short * t_short), 1.0, 0.05);
  const double t_long = 20.0 * tau;
  EXPECT_NEAR(dm::g_of_t(t_long, p, halo) / (tau * t_long), 1.0, 0.10);
}

TEST(GOfT, MonotoneAndCrossover) {
  const dm::HaloParams halo;
  const auto p = dm::on_peak(kMass, halo);
  const double tau = dm::coherence_time(p, halo);
  double prev = 0.0;
  for (double r = 0.05; r <= 20.0; r *= 2.0) {
    const double g = dm::g_of_t(r * tau, p, halo);
    EXPECT_GE(g, prev);
    prev = g;
  }
  // t^2 and tau t meet at t = tau; the true curve bends over within a factor 2 of it.
  const double g_tau = dm::g_of_t(tau, p, halo);
  EXPECT_GT(g_tau, 0.5 * tau * tau);
  EXPECT_LT(g_tau, tau * tau);
}

TEST(GOfT, DetunedCavityIsOneSided) {
  const dm::HaloParams halo;
  const auto p = dm::on_peak(kMass, halo);
  const double tau = dm::coherence_time(p, halo);
  const double shift = kTwoPi / tau;  // one DM linewidth
  dm::SearchPoint above = p, below = p;
  above.omega_c += shift;
  below.omega_c -= shift;
  const double g0 = dm::g_of_t(2.0 * tau, p, halo);
  const double ga = dm::g_of_t(2.0 * tau, above, halo);
  const double gb = dm::g_of_t(2.0 * tau, below, halo);
  EXPECT_LT(ga, g0);
  EXPECT_LT(gb, g0);
  EXPECT_GT(ga, 5.0 * gb);
}

TEST(Excitation, UnitAnchorAndScaling) {
  const dm::HaloParams halo;
  const dm::SearchPoint p{kMass, kMass, 4.45};
  EXPECT_NEAR(dm::rho_m_veff(p, halo) / 1.10e35, 1.0, 0.01);
  const double tau = 1e-4;
  EXPECT_EQ(dm::excitation_probability(0.0, p, halo, tau, 12.0), 0.0);
  const double g = dm::g_of_t(tau, p, halo);
  const double p1 = dm::excitation_probability(1e-15, p, halo, tau, 1.0);
  EXPECT_NEAR(p1, 1e-30 * dm::rho_m_veff(p, halo) * g, 1e-12 * p1);
  EXPECT_NEAR(dm::excitation_probability(1e-15, p, halo, tau, 12.0) / p1, 12.0, 1e-12);
  EXPECT_NEAR(dm::excitation_probability(2e-15, p, halo, tau, 1.0) / p1, 4.0, 1e-12);
}

TEST(TunedShift, DispersiveLimit) {
  const dm::TuningDrive drive{kTwoPi * 0.51e6, kTwoPi * 1.0e6};
  EXPECT_NEAR(dm::tuned_shift(drive) / kTwoPi, 65.025e3, 1.0);
  // The exact two-level splitting approaches the dispersive formula as Delta/Omega grows.
  double prev_err = 1.0;
  for (double ratio : {5.0, 10.0, 20.0, 50.0, 100.0}) {
    const dm::TuningDrive d{kTwoPi * 0.51e6, ratio * kTwoPi * 0.51e6};
    const double err = std::abs(exact_shift(d.rabi, d.detuning) / dm::tuned_shift(d) - 1.0);
    EXPECT_LT(err, prev_err);
    EXPECT_LT(err, 1.5 / (ratio * ratio));
    prev_err = err;
  }
  const dm::TuningDrive flipped{drive.rabi, -drive.detuning};
  EXPECT_DOUBLE_EQ(dm::tuned_shift(flipped), -dm::tuned_shift(drive));
  EXPECT_LT(std::abs(dm::tuned_shift({drive.rabi, 1e30})), 1e-15);
  EXPECT_THROW(dm::tuned_shift({drive.rabi, 0.0}), catscope::Error);
}

TEST(DmCsv, Headers) {
  const dm::HaloParams halo;
  const auto p = dm::on_peak(kMass, halo);
  std::ostringstream a, b;
  dm::write_lineshape_csv(a, p, halo, 10);
  dm::write_g_csv(b, {1e-6, 1e-5}, p, halo);
  const std::string text = b.str();
  EXPECT_EQ(a.str().rfind("omega,f\n", 0), 0u);
  EXPECT_EQ(text.rfind("t,g,coherent,incoherent\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}
