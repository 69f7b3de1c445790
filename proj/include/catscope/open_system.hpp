#pragma once

// Photon loss (and optional heating) of a cavity mode:
//   drho/dt = kappa/2 (2 a rho a^dag - a^dag a rho - rho a^dag a)
//           + kappa n_th/2 (2 a^dag rho a - a a^dag rho - rho a a^dag)
// integrated with an embedded Dormand-Prince 5(4) pair, plus the closed-form
// transition probabilities between M-component cat states under pure loss.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <ostream>
#include <vector>

#include "catscope/fock.hpp"

namespace catscope::open_system {

using fock::CMatrix;
using fock::cplx;
using fock::DensityMatrix;

struct LossChannel {
  double kappa = 1.0;      // 1/s
  double n_thermal = 0.0;  // heating occupation

  void validate() const {
    require(std::isfinite(kappa) && kappa > 0.0, Errc::InvalidArgument, "kappa must be > 0");
    require(std::isfinite(n_thermal) && n_thermal >= 0.0, Errc::InvalidArgument,
            "n_thermal must be >= 0");
  }
};

struct EvolutionResult {
  DensityMatrix rho_t;
  double t = 0.0;
  int steps = 0;
};

struct IntegratorOptions {
  double abs_tol = 1e-10;
  double rel_tol = 1e-10;
  int max_steps = 1'000'000;
};

namespace detail {

class Liouvillian {
 public:
  Liouvillian(int dim, const LossChannel& ch) : dim_(dim), ch_(ch), sq_(dim), up_(dim) {
    for (int n = 0; n < dim; ++n) {
      sq_[n] = std::sqrt(static_cast<double>(n));
      // a a^dag on the truncated space: n+1 except at the top level.
      up_[n] = (n + 1 < dim) ? n + 1.0 : 0.0;
    }
  }

  void apply(const CMatrix& rho, CMatrix& out) const {
    const double k = ch_.kappa;
    const double kh = ch_.kappa * ch_.n_thermal;
    for (int n = 0; n < dim_; ++n) {
      for (int m = 0; m < dim_; ++m) {
        cplx v = -0.5 * k * (m + n) * rho(m, n);
        if (m + 1 < dim_ && n + 1 < dim_) v += k * sq_[m + 1] * sq_[n + 1] * rho(m + 1, n + 1);
        if (kh > 0.0) {
          v -= 0.5 * kh * (up_[m] + up_[n]) * rho(m, n);
          if (m > 0 && n > 0) v += kh * sq_[m] * sq_[n] * rho(m - 1, n - 1);
        }
        out(m, n) = v;
      }
    }
  }

 private:
  int dim_;
  LossChannel ch_;
  std::vector<double> sq_;
  std::vector<double> up_;
};

/// Advances rho from 0 to `duration` in place; returns accepted steps.
inline int integrate(CMatrix& rho, const LossChannel& ch, double duration,
                     const IntegratorOptions& opt) {
  if (duration <= 0.0) return 0;
  const int dim = static_cast<int>(rho.rows());
  const Liouvillian L(dim, ch);

  // Dormand-Prince coefficients.
  constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  constexpr double a21 = 1.0 / 5;
  constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                   a54 = -212.0 / 729;
  constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                   a64 = 49.0 / 176, a65 = -5103.0 / 18656;
  constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                   b6 = 11.0 / 84;
  constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                   e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
  (void)c2, (void)c3, (void)c4, (void)c5;

  CMatrix k1(dim, dim), k2(dim, dim), k3(dim, dim), k4(dim, dim), k5(dim, dim), k6(dim, dim),
      k7(dim, dim), y(dim, dim), y5(dim, dim);

  const double rate = ch.kappa * (1.0 + ch.n_thermal) * dim;
  double h = std::min(duration, 0.01 / rate);
  double t = 0.0;
  int accepted = 0;
  L.apply(rho, k1);
  for (int iter = 0; iter < opt.max_steps; ++iter) {
    if (t >= duration) return accepted;
    h = std::min(h, duration - t);
    y = rho + h * a21 * k1;
    L.apply(y, k2);
    y = rho + h * (a31 * k1 + a32 * k2);
    L.apply(y, k3);
    y = rho + h * (a41 * k1 + a42 * k2 + a43 * k3);
    L.apply(y, k4);
    y = rho + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
    L.apply(y, k5);
    y = rho + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
    L.apply(y, k6);
    y5 = rho + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
    L.apply(y5, k7);
    const CMatrix err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    double err_norm = 0.0;
    for (int n = 0; n < dim; ++n) {
      for (int m = 0; m < dim; ++m) {
        const double scale = opt.abs_tol + opt.rel_tol * std::max(std::abs(rho(m, n)),
                                                                   std::abs(y5(m, n)));
        err_norm = std::max(err_norm, std::abs(err(m, n)) / scale);
      }
    }
    if (!std::isfinite(err_norm)) throw Error(Errc::StepFailure, "non-finite integrator error");
    if (err_norm <= 1.0) {
      t += h;
      rho = y5;
      k1 = k7;
      ++accepted;
    }
    const double factor =
        err_norm == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err_norm, -0.2), 0.2, 5.0);
    h *= factor;
    if (h < 1e-14 * duration) throw Error(Errc::StepFailure, "step size underflow");
  }
  throw Error(Errc::StepFailure, "maximum step count exceeded");
}

inline DensityMatrix finalize(const CMatrix& rho) {
  CMatrix herm = 0.5 * (rho + rho.adjoint());
  return DensityMatrix(std::move(herm));
}

}  // namespace detail

inline EvolutionResult lindblad_evolve(const DensityMatrix& rho0, const LossChannel& ch, double t,
                                       const IntegratorOptions& opt = {}) {
  ch.validate();
  require(std::isfinite(t) && t >= 0.0, Errc::InvalidArgument, "evolution time must be >= 0");
  CMatrix rho = rho0.matrix();
  const int steps = detail::integrate(rho, ch, t, opt);
  return {detail::finalize(rho), t, steps};
}

/// States at each of the (ascending) sample times.
inline std::vector<EvolutionResult> lindblad_trajectory(const DensityMatrix& rho0,
                                                        const LossChannel& ch,
                                                        const std::vector<double>& times,
                                                        const IntegratorOptions& opt = {}) {
  ch.validate();
  std::vector<EvolutionResult> out;
  CMatrix rho = rho0.matrix();
  double now = 0.0;
  int steps = 0;
  for (double t : times) {
    require(t >= now, Errc::InvalidArgument, "trajectory times must be ascending");
    steps += detail::integrate(rho, ch, t - now, opt);
    now = t;
    out.push_back({detail::finalize(rho), t, steps});
  }
  return out;
}

inline double trace_distance(const DensityMatrix& a, const DensityMatrix& b) {
  require(a.dim() == b.dim(), Errc::DimMismatch, "trace distance dimension mismatch");
  Eigen::SelfAdjointEigenSolver<CMatrix> solver(a.matrix() - b.matrix(), Eigen::EigenvaluesOnly);
  return 0.5 * solver.eigenvalues().cwiseAbs().sum();
}

namespace detail {

/// sum_{n = l mod M} x^n / n!, scaled by e^{-x} for stability.
inline double scaled_sector_sum(double x, int components, int l) {
  if (x == 0.0) return l == 0 ? 1.0 : 0.0;
  const double log_x = std::log(x);
  double sum = 0.0;
  for (int n = l;; n += components) {
    const double term = std::exp(n * log_x - std::lgamma(n + 1.0) - x);
    sum += term;
    if (n > x && term < 1e-18 * sum) break;
  }
  return sum;
}

}  // namespace detail

/// Tr[rho_j(t) rho_l(0)] for M-component cats of amplitude alpha under pure
/// loss. Uses the decayed-cat density matrix
///   rho_j(t) = N_j^2 sum_{k,k'} e^{-ij(phi_k - phi_k')} <a_k'|a_k>^{1 - e^{-kt}}
///              |a_k e^{-kt/2}><a_k' e^{-kt/2}|
/// with exact normalization and the exact overlap <phi_l(alpha)|e^{i phi} alpha e^{-kt/2}>.
/// For |alpha| >> 1 this reduces to M N_j^2 N_l^2 sum_k (...).
inline double cat_transition_probability(int components, int j, int l, cplx alpha, double kappa,
                                         double t) {
  require(components >= 2, Errc::InvalidIndex, "need M >= 2");
  require(j >= 0 && j < components && l >= 0 && l < components, Errc::InvalidIndex,
          "cat indices outside [0, M)");
  require(t >= 0.0 && kappa > 0.0, Errc::InvalidArgument, "need t >= 0 and kappa > 0");
  const int M = components;
  const double x = std::norm(alpha);
  require(x > 0.0 || (j == 0 && l == 0), Errc::ZeroAmplitude, "vacuum only has sector 0");
  if (x == 0.0) return 1.0;
  const double decay = std::exp(-kappa * t);
  const double x_overlap = x * std::sqrt(decay);  // alpha^* alpha e^{-kt/2}
  const double x_decayed = x * decay;             // |alpha e^{-kt/2}|^2

  // Scaled sums: S_l(y) = e^{y} s_l(y).
  const double s_j = detail::scaled_sector_sum(x, M, j);
  const double s_l = detail::scaled_sector_sum(x, M, l);
  const double s_l_overlap = detail::scaled_sector_sum(x_overlap, M, l);
  // N_j^2 = e^{x} / (M^2 S_j(x)),  |A_l|^2 = e^{-x_decayed} S_l(x_overlap)^2 / S_l(x).
  // Exponents: x - x - x_decayed + 2 x_overlap - x collapse to the log prefactor below.
  const double log_pref = -x_decayed + 2.0 * x_overlap - x;
  const double pref = std::exp(log_pref) * s_l_overlap * s_l_overlap / (M * s_j * s_l);

  cplx sum = 0.0;
  for (int d = 0; d < M; ++d) {
    const double phi = 2.0 * std::numbers::pi * d / M;
    const cplx expo = cplx(0.0, -(j - l) * phi) - x * (1.0 - decay) * (1.0 - std::polar(1.0, phi));
    sum += std::exp(expo);
  }
  return std::clamp(pref * sum.real(), 0.0, 1.0 + 1e-9);
}

/// Approximate form with N_l^2 in place of the exact decayed overlap.
inline double cat_transition_probability_large_alpha(int components, int j, int l, cplx alpha,
                                                     double kappa, double t) {
  const int M = components;
  const double x = std::norm(alpha);
  const double decay = std::exp(-kappa * t);
  const double s_j = detail::scaled_sector_sum(x, M, j);
  const double s_l = detail::scaled_sector_sum(x, M, l);
  cplx sum = 0.0;
  for (int d = 0; d < M; ++d) {
    const double phi = 2.0 * std::numbers::pi * d / M;
    sum += std::exp(cplx(0.0, -(j - l) * phi) - x * (1.0 - decay) * (1.0 - std::polar(1.0, phi)));
  }
  // M N_j^2 N_l^2 with N^2 = 1 / (M^2 s(x)).
  return (sum / (M * M * M * s_j * s_l)).real();
}

/// Lifetime T1c / |alpha|^2 of an M-component cat.
inline double effective_lifetime(cplx alpha, double t1c) {
  const double x = std::norm(alpha);
  require(x > 0.0, Errc::ZeroAmplitude, "effective lifetime needs |alpha| > 0");
  return t1c / x;
}

/// CSV rows (t, j, l, P) for every sector pair at each time.
inline void write_transition_csv(std::ostream& os, int components, cplx alpha, double kappa,
                                 const std::vector<double>& times) {
  os << "t,j,l,p\n";
  os.precision(17);
  for (double t : times)
    for (int j = 0; j < components; ++j)
      for (int l = 0; l < components; ++l)
        os << t << ',' << j << ',' << l << ','
           << cat_transition_probability(components, j, l, alpha, kappa, t) << '\n';
}

}  // namespace catscope::open_system
