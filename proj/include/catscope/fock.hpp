#pragma once

// Truncated Fock-space algebra: coherent, cat and compass states, displacement
// and parity operators, photon-number filters, overlaps.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <ostream>
#include <vector>

#include "catscope/error.hpp"

namespace catscope::fock {

using cplx = std::complex<double>;
using CVector = Eigen::VectorXcd;
using CMatrix = Eigen::MatrixXcd;
using RVector = Eigen::VectorXd;
using RMatrix = Eigen::MatrixXd;

inline constexpr double kNormTolerance = 1e-10;
inline constexpr double kTailTolerance = 1e-8;

/// Poisson mass of levels n >= dim for mean photon number `mean`.
inline double poisson_tail(double mean, int dim) {
  if (mean <= 0.0) return 0.0;
  double tail = 0.0;
  const double log_mean = std::log(mean);
  for (int n = dim;; ++n) {
    const double term = std::exp(n * log_mean - mean - std::lgamma(n + 1.0));
    tail += term;
    if (n > mean && term < 1e-18 * std::max(tail, 1e-300)) break;
    if (n > dim + 100000) break;
  }
  return tail;
}

/// Truncation rule: ceil(|a|^2 + 7|a| + 10) levels for amplitude |a|.
inline int recommended_dim(double amplitude) {
  const double a = std::abs(amplitude);
  return static_cast<int>(std::ceil(a * a + 7.0 * a + 10.0));
}

inline void require_budget(double amplitude, int dim, const char* what) {
  require(dim >= 1, Errc::InvalidArgument, "dim must be positive");
  const double tail = poisson_tail(amplitude * amplitude, dim);
  require(tail < kTailTolerance, Errc::TruncationTooSmall,
          std::string(what) + ": tail mass " + std::to_string(tail) + " with dim " +
              std::to_string(dim) + " (recommended " + std::to_string(recommended_dim(amplitude)) +
              ")");
}

inline void require_finite(cplx z, const char* what) {
  require(std::isfinite(z.real()) && std::isfinite(z.imag()), Errc::NonFinite,
          std::string(what) + " is not finite");
}

class DensityMatrix;

/// Normalized pure state on levels 0..dim-1.
class StateVector {
 public:
  StateVector() = default;

  /// Normalizes `amps`; rejects empty, zero or non-finite input.
  explicit StateVector(CVector amps) : amps_(std::move(amps)) {
    require(amps_.size() >= 1, Errc::InvalidArgument, "state needs at least one level");
    require(amps_.allFinite(), Errc::NonFinite, "state amplitudes not finite");
    const double norm = amps_.norm();
    require(norm > 0.0, Errc::ZeroAmplitude, "state has zero norm");
    amps_ /= norm;
  }

  static StateVector fock(int n, int dim) {
    require(n >= 0 && n < dim, Errc::InvalidIndex, "Fock level outside truncation");
    CVector v = CVector::Zero(dim);
    v(n) = 1.0;
    return StateVector(std::move(v));
  }

  int dim() const { return static_cast<int>(amps_.size()); }
  const CVector& amps() const { return amps_; }
  cplx operator[](int n) const { return amps_(n); }

  RVector populations() const { return amps_.cwiseAbs2(); }

  double mean_photon_number() const {
    double mean = 0.0;
    for (int n = 0; n < dim(); ++n) mean += n * std::norm(amps_(n));
    return mean;
  }

  /// Copy into a larger truncation (zero padded).
  StateVector padded(int new_dim) const {
    require(new_dim >= dim(), Errc::DimMismatch, "cannot pad to a smaller dimension");
    CVector v = CVector::Zero(new_dim);
    v.head(dim()) = amps_;
    return StateVector(std::move(v));
  }

  DensityMatrix density() const;

 private:
  CVector amps_;
};

/// Hermitian, unit-trace, positive semidefinite operator.
class DensityMatrix {
 public:
  DensityMatrix() = default;

  explicit DensityMatrix(CMatrix rho, bool check_positivity = true) : rho_(std::move(rho)) {
    require(rho_.rows() == rho_.cols() && rho_.rows() >= 1, Errc::DimMismatch,
            "density matrix must be square");
    require(rho_.allFinite(), Errc::NonFinite, "density matrix not finite");
    require((rho_ - rho_.adjoint()).cwiseAbs().maxCoeff() < 1e-10, Errc::InvalidArgument,
            "density matrix not Hermitian");
    require(std::abs(rho_.trace() - cplx(1.0)) < 1e-8, Errc::InvalidArgument,
            "density matrix trace differs from 1");
    if (check_positivity) {
      require(min_eigenvalue() >= -1e-8, Errc::NegativeProbability,
              "density matrix has a negative eigenvalue");
    }
  }

  int dim() const { return static_cast<int>(rho_.rows()); }
  const CMatrix& matrix() const { return rho_; }

  RVector populations() const { return rho_.diagonal().real(); }

  double mean_photon_number() const {
    double mean = 0.0;
    for (int n = 0; n < dim(); ++n) mean += n * rho_(n, n).real();
    return mean;
  }

  double min_eigenvalue() const {
    Eigen::SelfAdjointEigenSolver<CMatrix> solver(rho_, Eigen::EigenvaluesOnly);
    return solver.eigenvalues().minCoeff();
  }

  double purity() const { return (rho_ * rho_).trace().real(); }

  /// <psi|rho|psi>
  double fidelity(const StateVector& psi) const {
    require(psi.dim() == dim(), Errc::DimMismatch, "fidelity dimension mismatch");
    return std::max(0.0, (psi.amps().adjoint() * rho_ * psi.amps())(0, 0).real());
  }

  /// Tr[rho sigma]
  double overlap(const DensityMatrix& other) const {
    require(other.dim() == dim(), Errc::DimMismatch, "overlap dimension mismatch");
    return (rho_ * other.rho_).trace().real();
  }

 private:
  CMatrix rho_;
};

inline DensityMatrix StateVector::density() const {
  return DensityMatrix(amps_ * amps_.adjoint(), false);
}

struct CatSpec {
  cplx alpha{0.0, 0.0};
  int components = 4;  // M
  int index = 0;       // j in [0, M)
};

struct PhaseGrid {
  double re_min = -3.0;
  double re_max = 3.0;
  int re_count = 61;
  double im_min = -3.0;
  double im_max = 3.0;
  int im_count = 61;

  void validate() const {
    require(re_count >= 2 && im_count >= 2, Errc::InvalidArgument, "grid needs >= 2 samples");
    require(std::isfinite(re_min) && std::isfinite(re_max) && std::isfinite(im_min) &&
                std::isfinite(im_max),
            Errc::NonFinite, "grid extents not finite");
  }
  double re_at(int i) const { return re_min + (re_max - re_min) * i / (re_count - 1); }
  double im_at(int k) const { return im_min + (im_max - im_min) * k / (im_count - 1); }
  double re_step() const { return (re_max - re_min) / (re_count - 1); }
  double im_step() const { return (im_max - im_min) / (im_count - 1); }
  double max_abs() const {
    const double re = std::max(std::abs(re_min), std::abs(re_max));
    const double im = std::max(std::abs(im_min), std::abs(im_max));
    return std::hypot(re, im);
  }
};

// ---------------------------------------------------------------------------
// Ladder operators on the truncated space.

inline CMatrix annihilation(int dim) {
  CMatrix a = CMatrix::Zero(dim, dim);
  for (int n = 1; n < dim; ++n) a(n - 1, n) = std::sqrt(static_cast<double>(n));
  return a;
}

inline CMatrix creation(int dim) { return annihilation(dim).adjoint(); }

inline CMatrix number_operator(int dim) {
  CMatrix n = CMatrix::Zero(dim, dim);
  for (int k = 0; k < dim; ++k) n(k, k) = static_cast<double>(k);
  return n;
}

/// a|psi>, renormalized; throws ZeroAmplitude for the vacuum.
inline StateVector apply_annihilation(const StateVector& psi) {
  CVector out = CVector::Zero(psi.dim());
  for (int n = 1; n < psi.dim(); ++n) out(n - 1) = std::sqrt(static_cast<double>(n)) * psi[n];
  return StateVector(std::move(out));
}

// ---------------------------------------------------------------------------
// States.

inline StateVector coherent_state(cplx alpha, int dim) {
  require_finite(alpha, "coherent amplitude");
  require_budget(std::abs(alpha), dim, "coherent_state");
  CVector amps = CVector::Zero(dim);
  const double r = std::abs(alpha);
  const double phase = std::arg(alpha);
  amps(0) = std::exp(-0.5 * r * r);
  if (r > 0.0) {
    const double log_r = std::log(r);
    for (int n = 1; n < dim; ++n) {
      const double mag = std::exp(-0.5 * r * r + n * log_r - 0.5 * std::lgamma(n + 1.0));
      amps(n) = std::polar(mag, n * phase);
    }
  }
  return StateVector(std::move(amps));
}

/// M-component cat |phi_{M,j}>: Fock amplitudes alpha^n/sqrt(n!) on n = j (mod M),
/// normalized over the finite sum (no large-|alpha| approximation).
inline StateVector cat_state(const CatSpec& spec, int dim) {
  require(spec.components >= 1, Errc::InvalidIndex, "cat needs M >= 1");
  require(spec.index >= 0 && spec.index < spec.components, Errc::InvalidIndex,
          "cat index outside [0, M)");
  require_finite(spec.alpha, "cat amplitude");
  require(spec.index < dim, Errc::TruncationTooSmall, "cat sector not representable");
  const double r = std::abs(spec.alpha);
  const double phase = std::arg(spec.alpha);
  if (r == 0.0) {
    require(spec.index == 0, Errc::ZeroAmplitude, "vacuum has no population in sector j > 0");
    return StateVector::fock(0, dim);
  }
  const double log_r = std::log(r);
  // Log magnitudes relative to the sector maximum to avoid under/overflow.
  double log_max = -std::numeric_limits<double>::infinity();
  for (int n = spec.index; n < dim; n += spec.components) {
    log_max = std::max(log_max, n * log_r - 0.5 * std::lgamma(n + 1.0));
  }
  CVector amps = CVector::Zero(dim);
  double kept = 0.0;
  for (int n = spec.index; n < dim; n += spec.components) {
    const double mag = std::exp(n * log_r - 0.5 * std::lgamma(n + 1.0) - log_max);
    amps(n) = std::polar(mag, n * phase);
    kept += mag * mag;
  }
  // Relative sector tail beyond the truncation.
  double tail = 0.0;
  for (int n = spec.index + ((dim - spec.index + spec.components - 1) / spec.components) *
                                spec.components;
       ; n += spec.components) {
    const double term = std::exp(2.0 * (n * log_r - 0.5 * std::lgamma(n + 1.0) - log_max));
    tail += term;
    if (n > r * r && term < 1e-18 * std::max(tail, 1e-300)) break;
    if (n > dim + 100000) break;
  }
  require(tail / (kept + tail) < kTailTolerance, Errc::TruncationTooSmall,
          "cat_state: sector tail mass " + std::to_string(tail / (kept + tail)) + " with dim " +
              std::to_string(dim));
  return StateVector(std::move(amps));
}

/// Generalized parity exp(i 2 pi a^dag a / M).
inline CMatrix generalized_parity(int components, int dim) {
  require(components >= 1, Errc::InvalidArgument, "parity needs M >= 1");
  require(dim >= 1, Errc::InvalidArgument, "dim must be positive");
  CMatrix p = CMatrix::Zero(dim, dim);
  for (int n = 0; n < dim; ++n) {
    const long long r = n % components;
    p(n, n) = std::polar(1.0, 2.0 * std::numbers::pi * static_cast<double>(r) / components);
  }
  return p;
}

/// Sinusoidal photon-number filter diag(cos(n theta / 2)).
inline RMatrix sine_filter(double theta, int dim) {
  require(dim >= 1, Errc::InvalidArgument, "dim must be positive");
  RMatrix f = RMatrix::Zero(dim, dim);
  for (int n = 0; n < dim; ++n) f(n, n) = std::cos(0.5 * n * theta);
  return f;
}

/// Kraus operators of one Ramsey photon-number filter with conditional phase
/// theta, in the frame where the ground-outcome branch is (1 + e^{i n theta})/2.
/// Their moduli are |cos(n theta/2)| and |sin(n theta/2)|.
inline CVector ramsey_kraus_diagonal(double theta, int dim, bool excited_outcome) {
  CVector d(dim);
  for (int n = 0; n < dim; ++n) {
    const cplx phase = std::polar(1.0, n * theta);
    d(n) = excited_outcome ? 0.5 * (1.0 - phase) : 0.5 * (1.0 + phase);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Displacement.

namespace detail {

/// (beta a^dag - beta^* a) v on the truncated space.
inline CVector apply_generator(cplx beta, const CVector& v) {
  const Eigen::Index dim = v.size();
  CVector out(dim);
  for (Eigen::Index n = 0; n < dim; ++n) {
    cplx acc = 0.0;
    if (n > 0) acc += beta * std::sqrt(static_cast<double>(n)) * v(n - 1);
    if (n + 1 < dim) acc -= std::conj(beta) * std::sqrt(static_cast<double>(n + 1)) * v(n + 1);
    out(n) = acc;
  }
  return out;
}

}  // namespace detail

/// exp(beta a^dag - beta^* a) v by sub-stepped Taylor series on the
/// tridiagonal generator. No truncation check.
inline CVector apply_displacement(cplx beta, const CVector& v) {
  // Sub-steps of generator norm <= 4 keep the Taylor cancellation below ~1e-14.
  const double bound = 2.0 * std::abs(beta) * std::sqrt(static_cast<double>(v.size()));
  const int steps = std::max(1, static_cast<int>(std::ceil(bound / 4.0)));
  const cplx h = beta / static_cast<double>(steps);
  CVector x = v;
  for (int s = 0; s < steps; ++s) {
    CVector term = x;
    CVector sum = x;
    for (int k = 1; k < 60; ++k) {
      term = detail::apply_generator(h, term) / static_cast<double>(k);
      sum += term;
      if (term.norm() < 1e-18 * sum.norm()) break;
    }
    x = std::move(sum);
  }
  return x;
}

/// D(beta) = exp(beta a^dag - beta^* a) by scaling and squaring; the vacuum
/// column is checked against the closed-form coherent state.
inline CMatrix displacement_operator(cplx beta, int dim) {
  require_finite(beta, "displacement amplitude");
  require_budget(std::abs(beta), dim, "displacement_operator");
  const CMatrix a = annihilation(dim);
  const CMatrix gen = beta * a.adjoint() - std::conj(beta) * a;
  const double norm1 = gen.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  if (norm1 > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm1 / 0.5)));
  const CMatrix scaled = gen / std::ldexp(1.0, squarings);
  CMatrix result = CMatrix::Identity(dim, dim);
  CMatrix term = CMatrix::Identity(dim, dim);
  for (int k = 1; k < 30; ++k) {
    term = (term * scaled) / static_cast<double>(k);
    result += term;
    if (term.cwiseAbs().maxCoeff() < 1e-20) break;
  }
  for (int s = 0; s < squarings; ++s) result = result * result;
  const CVector column = result.col(0);
  const CVector reference = coherent_state(beta, dim).amps();
  require((column - reference).norm() < 1e-7, Errc::TruncationTooSmall,
          "displacement_operator: D|0> deviates from coherent state; increase dim");
  return result;
}

// ---------------------------------------------------------------------------
// Overlaps and measures.

/// |<a|op|b>|^2
inline double transition_probability(const StateVector& a, const CMatrix& op,
                                     const StateVector& b) {
  require(a.dim() == b.dim() && op.rows() == a.dim() && op.cols() == b.dim(), Errc::DimMismatch,
          "transition_probability dimension mismatch");
  const cplx amp = a.amps().dot(op * b.amps());  // dot conjugates the first argument
  return std::norm(amp);
}

/// Statistical overlap sum_n sqrt(p_n q_n).
inline double population_fidelity(const RVector& measured, const RVector& ideal) {
  require(measured.size() == ideal.size(), Errc::DimMismatch, "population size mismatch");
  require(measured.minCoeff() >= 0.0 && ideal.minCoeff() >= 0.0, Errc::NegativeProbability,
          "populations must be nonnegative");
  require(measured.sum() <= 1.0 + 1e-6 && ideal.sum() <= 1.0 + 1e-6, Errc::NegativeProbability,
          "populations sum above 1");
  return std::clamp((measured.cwiseProduct(ideal)).cwiseSqrt().sum(), 0.0, 1.0);
}

/// Population in each residue class n = l (mod M).
inline RVector sector_populations(const RVector& populations, int components) {
  RVector out = RVector::Zero(components);
  for (Eigen::Index n = 0; n < populations.size(); ++n) out(n % components) += populations(n);
  return out;
}

// ---------------------------------------------------------------------------
// CSV: rows (n, Re amp, Im amp).

inline void write_state_csv(std::ostream& os, const StateVector& psi) {
  os << "n,re,im\n";
  os.precision(17);
  for (int n = 0; n < psi.dim(); ++n) os << n << ',' << psi[n].real() << ',' << psi[n].imag() << '\n';
}

}  // namespace catscope::fock
