#pragma once

// Dark-photon signal model: standard-halo speed distribution, the one-sided
// energy lineshape, coherence time, the accumulation function g(t) and the
// resulting cavity excitation probability. Frequencies are angular (rad/s).

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <vector>

#include "catscope/error.hpp"

namespace catscope::dm {

inline constexpr double kSpeedOfLight = 299792.458;      // km/s
inline constexpr double kHbarEvSeconds = 6.582119569e-16;  // eV s
inline constexpr double kGeV = 1e9;                        // eV

struct HaloParams {
  double rho_dm = 0.4;  // GeV/cm^3
  double v_vir = 220.0;  // km/s
  double v_g = 232.0;    // km/s

  bool operator==(const HaloParams&) const = default;

  void validate() const {
    require(rho_dm > 0.0 && v_vir > 0.0 && v_g > 0.0, Errc::InvalidArgument,
            "halo parameters must be positive");
  }
  /// Upper speed used as the quadrature cutoff.
  double v_cut() const { return v_g + 6.0 * v_vir; }
};

struct SearchPoint {
  double m_dm = 2.0 * std::numbers::pi * 6.442e9;     // rad/s
  double omega_c = 2.0 * std::numbers::pi * 6.442e9;  // rad/s
  double v_eff = 4.45;                                // cm^3

  bool operator==(const SearchPoint&) const = default;

  void validate() const {
    require(m_dm > 0.0 && omega_c > 0.0 && v_eff > 0.0, Errc::InvalidArgument,
            "search point needs positive m_dm, omega_c, v_eff");
  }
  /// Fractional detuning omega_c / m - 1.
  double cavity_offset() const { return (omega_c - m_dm) / m_dm; }
};

struct TuningDrive {
  double rabi = 2.0 * std::numbers::pi * 0.51e6;  // rad/s
  double detuning = 2.0 * std::numbers::pi * 1e6;  // rad/s
};

/// Maxwellian speed density with the solar boost, in s/km.
inline double halo_speed_pdf(double v, const HaloParams& halo) {
  if (!(v > 0.0)) return 0.0;
  const double vv2 = halo.v_vir * halo.v_vir;
  const double minus = (v - halo.v_g) * (v - halo.v_g) / vv2;
  const double plus = (v + halo.v_g) * (v + halo.v_g) / vv2;
  return v / (std::sqrt(std::numbers::pi) * halo.v_vir * halo.v_g) *
         (std::exp(-minus) - std::exp(-plus));
}

namespace detail {

/// m * f(omega) as a function of x = omega/m - 1 (dimensionless).
inline double lineshape_unit(double x, const HaloParams& halo) {
  if (!(x > 0.0)) return 0.0;
  const double u = std::sqrt(2.0 * x);  // speed in units of c
  return halo_speed_pdf(u * kSpeedOfLight, halo) * kSpeedOfLight / u;
}

/// Speed (km/s) at which the lineshape peaks. f(omega) ~ f(v)/v.
inline double peak_speed(const HaloParams& halo) {
  const auto neg = [&](double v) { return -halo_speed_pdf(v, halo) / v; };
  const auto r = boost::math::tools::brent_find_minima(neg, 1e-3, halo.v_cut(), 50);
  return r.first;
}

template <typename F>
double integrate_segment(F&& f, double a, double b, double tol, double abs_floor) {
  double err = 0.0;
  const double value =
      boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, a, b, 15, tol, &err);
  require(std::isfinite(value), Errc::QuadratureFailure, "quadrature produced a non-finite value");
  require(err <= 1e-7 * std::abs(value) + abs_floor, Errc::QuadratureFailure,
          "quadrature error estimate too large");
  return value;
}

}  // namespace detail

/// Energy density f(omega) in s; strictly zero for omega <= m.
inline double lineshape(double omega, const SearchPoint& point, const HaloParams& halo) {
  return detail::lineshape_unit((omega - point.m_dm) / point.m_dm, halo) / point.m_dm;
}

/// Fractional offset x_m with omega_m = (1 + x_m) m.
inline double peak_offset(const HaloParams& halo) {
  const double u = detail::peak_speed(halo) / kSpeedOfLight;
  return 0.5 * u * u;
}

inline double omega_peak(const SearchPoint& point, const HaloParams& halo) {
  return point.m_dm * (1.0 + peak_offset(halo));
}

/// Point with omega_c placed on the lineshape peak.
inline SearchPoint on_peak(double m_dm, const HaloParams& halo, double v_eff = 4.45) {
  SearchPoint p{m_dm, m_dm, v_eff};
  p.omega_c = omega_peak(p, halo);
  return p;
}

/// tau_DM = 2 pi f(omega_m).
inline double coherence_time(const SearchPoint& point, const HaloParams& halo) {
  return 2.0 * std::numbers::pi * detail::lineshape_unit(peak_offset(halo), halo) / point.m_dm;
}

/// g(t) = int f(omega) [sin((omega - omega_c) t / 2) / ((omega - omega_c) / 2)]^2 d omega,
/// integrated over speed with the domain split at the kernel nulls.
inline double g_of_t(double t, const SearchPoint& point, const HaloParams& halo) {
  point.validate();
  halo.validate();
  require(std::isfinite(t) && t >= 0.0, Errc::InvalidArgument, "g(t) needs t >= 0");
  if (t == 0.0) return 0.0;
  const double m = point.m_dm;
  const double xc = point.cavity_offset();
  const double v_max = halo.v_cut();
  const double x_max = 0.5 * std::pow(v_max / kSpeedOfLight, 2);

  const auto integrand = [&](double v) {
    const double u = v / kSpeedOfLight;
    const double delta = m * (0.5 * u * u - xc);
    const double phase = 0.5 * delta * t;
    const double sinc = (std::abs(phase) < 1e-8) ? 1.0 - phase * phase / 6.0 : std::sin(phase) / phase;
    return halo_speed_pdf(v, halo) * t * t * sinc * sinc;
  };

  std::vector<double> cuts{0.0, v_max};
  const double step = 2.0 * std::numbers::pi / (m * t);  // null spacing in x
  const double k_lo = std::ceil(-xc / step);
  const double k_hi = std::floor((x_max - xc) / step);
  require(k_hi - k_lo < 2e5, Errc::QuadratureFailure, "g(t): too many kernel oscillations");
  for (double k = k_lo; k <= k_hi; k += 1.0) {
    const double x = xc + k * step;
    if (x > 0.0 && x < x_max) cuts.push_back(kSpeedOfLight * std::sqrt(2.0 * x));
  }
  if (xc > 0.0 && xc < x_max) cuts.push_back(kSpeedOfLight * std::sqrt(2.0 * xc));
  cuts.push_back(detail::peak_speed(halo));
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  double total = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i)
    total += detail::integrate_segment(integrand, cuts[i], cuts[i + 1], 1e-10, 1e-13 * t * t);
  return total;
}

/// rho_DM * m_DM * V_eff in s^-2 (GeV/cm^3 * cm^3 -> rad/s via hbar).
inline double rho_m_veff(const SearchPoint& point, const HaloParams& halo) {
  const double energy_rate = halo.rho_dm * point.v_eff * kGeV / kHbarEvSeconds;  // 1/s
  const double out = energy_rate * point.m_dm;
  require(std::isfinite(out), Errc::UnitOverflow, "rho m V conversion overflowed");
  return out;
}

/// p = eps^2 m^2 rho V / omega_c * g(t) * |alpha|^2  (alpha_sq = 1 for the vacuum probe).
inline double excitation_probability_from_g(double epsilon, const SearchPoint& point,
                                            const HaloParams& halo, double g, double alpha_sq) {
  require(alpha_sq >= 0.0, Errc::InvalidArgument, "alpha_sq must be >= 0");
  const double p = epsilon * epsilon * rho_m_veff(point, halo) * (point.m_dm / point.omega_c) * g *
                   alpha_sq;
  require(std::isfinite(p), Errc::UnitOverflow, "excitation probability not finite");
  if (p > 0.1) warn("excitation probability " + std::to_string(p) + " outside perturbative regime");
  return p;
}

inline double excitation_probability(double epsilon, const SearchPoint& point,
                                     const HaloParams& halo, double t, double alpha_sq) {
  return excitation_probability_from_g(epsilon, point, halo, g_of_t(t, point, halo), alpha_sq);
}

/// Dispersive cavity shift Omega^2 / (4 Delta).
inline double tuned_shift(const TuningDrive& drive) {
  require(drive.detuning != 0.0, Errc::ZeroDetuning, "tuned_shift needs nonzero detuning");
  if (std::abs(drive.detuning) < 5.0 * std::abs(drive.rabi))
    warn("tuning detuning below 5 Omega; dispersive shift is approximate");
  return drive.rabi * drive.rabi / (4.0 * drive.detuning);
}

/// Rows (omega, f) on n points spanning [m, m (1 + x_cut)].
inline void write_lineshape_csv(std::ostream& os, const SearchPoint& point, const HaloParams& halo,
                                int n = 400) {
  require(n >= 2, Errc::InvalidArgument, "need >= 2 samples");
  const double x_cut = 0.5 * std::pow(halo.v_cut() / kSpeedOfLight, 2);
  os << "omega,f\n";
  os.precision(17);
  for (int i = 0; i < n; ++i) {
    const double omega = point.m_dm * (1.0 + x_cut * i / (n - 1));
    os << omega << ',' << lineshape(omega, point, halo) << '\n';
  }
}

/// Rows (t, g, t^2, tau_DM t).
inline void write_g_csv(std::ostream& os, const std::vector<double>& times,
                        const SearchPoint& point, const HaloParams& halo) {
  const double tau = coherence_time(point, halo);
  os << "t,g,coherent,incoherent\n";
  os.precision(17);
  for (double t : times) os << t << ',' << g_of_t(t, point, halo) << ',' << t * t << ',' << tau * t << '\n';
}

}  // namespace catscope::dm
