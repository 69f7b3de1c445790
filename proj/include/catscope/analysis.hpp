#pragma once

// Binomial maximum-likelihood fits of linear response models (detector
// calibration, global search fit), kinetic-mixing limits, threshold sweeps,
// frequency-bin background subtraction and pulse-calibration helpers.

#include <gsl/gsl_errno.h>
#include <gsl/gsl_fit.h>
#include <gsl/gsl_multimin.h>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/roots.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "catscope/dm_model.hpp"
#include "catscope/error.hpp"
#include "catscope/fock.hpp"
#include "catscope/rng.hpp"
#include "json.hpp"

namespace catscope::analysis {

using fock::RMatrix;
using fock::RVector;

/// One-sided 90% quantile as used for the limits (not 1.2816).
inline constexpr double kZ90 = 1.28;

struct FitResult {
  std::vector<std::string> names;
  RVector params;
  RMatrix covariance;
  double log_likelihood = 0.0;
  bool boundary_hit = false;
  bool converged = false;
  int evaluations = 0;

  int index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    throw Error(Errc::InvalidArgument, "no fit parameter named '" + name + "'");
  }
  double value(const std::string& name) const { return params(index(name)); }
  double sigma(const std::string& name) const {
    const int i = index(name);
    return std::sqrt(std::max(0.0, covariance(i, i)));
  }
};

/// k_i ~ Binomial(n_i, p_i) with p = design * theta.
struct LinearBinomialProblem {
  RMatrix design;
  RVector k;
  RVector n;
  std::vector<std::string> names;
  RVector lower;  // -inf where unbounded

  void validate() const {
    const Eigen::Index m = design.rows(), d = design.cols();
    require(k.size() == m && n.size() == m && lower.size() == d &&
                static_cast<Eigen::Index>(names.size()) == d,
            Errc::DimMismatch, "binomial problem dimensions inconsistent");
    require(m >= d, Errc::DegenerateDesign, "fewer data points than parameters");
    for (Eigen::Index i = 0; i < m; ++i)
      require(n(i) > 0 && k(i) >= 0 && k(i) <= n(i), Errc::InvalidArgument,
              "need 0 <= k <= n and n > 0 at every point");
  }
};

namespace detail {

inline constexpr double kPFloor = 1e-15;

inline RVector reflect(const RVector& theta, const RVector& lower) {
  RVector t = theta;
  for (Eigen::Index i = 0; i < t.size(); ++i)
    if (std::isfinite(lower(i)) && t(i) < lower(i)) t(i) = 2.0 * lower(i) - t(i);
  return t;
}

/// Negative log-likelihood kernel (no binomial coefficients) plus a steep
/// penalty outside 0 < p < 1.
inline double nll(const LinearBinomialProblem& pr, const RVector& theta, bool* inside = nullptr) {
  const RVector p = pr.design * theta;
  double s = 0.0;
  bool ok = true;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double pc = std::clamp(p(i), kPFloor, 1.0 - kPFloor);
    s -= pr.k(i) * std::log(pc) + (pr.n(i) - pr.k(i)) * std::log1p(-pc);
    if (pc != p(i)) {
      ok = false;
      s += pr.n(i) * 1e6 * std::abs(p(i) - pc);
    }
  }
  if (inside) *inside = ok;
  return s;
}

inline void grad_hess(const LinearBinomialProblem& pr, const RVector& theta, RVector& g, RMatrix& H,
                      double p_floor_per_trial = 0.0) {
  const Eigen::Index d = theta.size();
  g = RVector::Zero(d);
  H = RMatrix::Zero(d, d);
  const RVector p = pr.design * theta;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    double pi = p(i);
    if (p_floor_per_trial > 0.0)
      pi = std::clamp(pi, p_floor_per_trial / pr.n(i), 1.0 - p_floor_per_trial / pr.n(i));
    const double k = pr.k(i), nk = pr.n(i) - pr.k(i);
    const RVector x = pr.design.row(i).transpose();
    g -= (k / pi - nk / (1.0 - pi)) * x;
    H += (k / (pi * pi) + nk / ((1.0 - pi) * (1.0 - pi))) * (x * x.transpose());
  }
}

struct SimplexContext {
  const LinearBinomialProblem* pr;
  RVector x0, scale;
  int evals = 0;
};

inline double simplex_objective(const gsl_vector* z, void* raw) {
  auto* ctx = static_cast<SimplexContext*>(raw);
  ++ctx->evals;
  RVector theta(ctx->x0.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i)
    theta(i) = ctx->x0(i) + ctx->scale(i) * gsl_vector_get(z, static_cast<std::size_t>(i));
  return nll(*ctx->pr, reflect(theta, ctx->pr->lower));
}

/// Nelder-Mead in scaled coordinates from one start; returns theta.
inline RVector simplex_run(SimplexContext& ctx, const RVector& z0, bool& converged) {
  const std::size_t d = static_cast<std::size_t>(z0.size());
  gsl_multimin_function fn{&simplex_objective, d, &ctx};
  gsl_vector* x = gsl_vector_alloc(d);
  gsl_vector* step = gsl_vector_alloc(d);
  for (std::size_t i = 0; i < d; ++i) {
    gsl_vector_set(x, i, z0(static_cast<Eigen::Index>(i)));
    gsl_vector_set(step, i, 0.5);
  }
  gsl_multimin_fminimizer* s = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, d);
  gsl_multimin_fminimizer_set(s, &fn, x, step);
  converged = false;
  for (int it = 0; it < 20000; ++it) {
    if (gsl_multimin_fminimizer_iterate(s) != GSL_SUCCESS) break;
    if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(s), 1e-9) == GSL_SUCCESS) {
      converged = true;
      break;
    }
  }
  RVector theta(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i)
    theta(static_cast<Eigen::Index>(i)) =
        ctx.x0(static_cast<Eigen::Index>(i)) +
        ctx.scale(static_cast<Eigen::Index>(i)) * gsl_vector_get(s->x, i);
  gsl_multimin_fminimizer_free(s);
  gsl_vector_free(step);
  gsl_vector_free(x);
  return reflect(theta, ctx.pr->lower);
}

/// Projected Newton steps on the (convex) likelihood; bound parameters with
/// an outward gradient are held fixed.
inline RVector newton_polish(const LinearBinomialProblem& pr, RVector theta, const RVector& scale,
                             bool& converged) {
  bool inside = false;
  double f = nll(pr, theta, &inside);
  if (!inside) return theta;
  const Eigen::Index d = theta.size();
  for (int it = 0; it < 200; ++it) {
    RVector g;
    RMatrix H;
    grad_hess(pr, theta, g, H);
    std::vector<Eigen::Index> free;
    for (Eigen::Index i = 0; i < d; ++i) {
      const bool at_bound = std::isfinite(pr.lower(i)) && theta(i) <= pr.lower(i) + 1e-12 * scale(i);
      if (!(at_bound && g(i) > 0.0)) free.push_back(i);
    }
    if (free.empty()) {
      converged = true;
      return theta;
    }
    const Eigen::Index nf = static_cast<Eigen::Index>(free.size());
    RMatrix Hf(nf, nf);
    RVector gf(nf);
    for (Eigen::Index a = 0; a < nf; ++a) {
      gf(a) = g(free[a]);
      for (Eigen::Index b = 0; b < nf; ++b) Hf(a, b) = H(free[a], free[b]);
    }
    const RVector df = Hf.ldlt().solve(-gf);
    if (!df.allFinite()) return theta;
    RVector delta = RVector::Zero(d);
    for (Eigen::Index a = 0; a < nf; ++a) delta(free[a]) = df(a);
    double t = 1.0;
    bool moved = false;
    RVector next = theta;
    while (t > 1e-12) {
      next = theta + t * delta;
      for (Eigen::Index i = 0; i < d; ++i)
        if (std::isfinite(pr.lower(i))) next(i) = std::max(next(i), pr.lower(i));
      bool ok = false;
      const double fn = nll(pr, next, &ok);
      if (ok && fn <= f + 1e-12 * std::abs(f)) {
        f = fn;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) {
      converged = true;
      return theta;
    }
    const double size = ((next - theta).array() / scale.array()).abs().maxCoeff();
    theta = next;
    if (size < 1e-11) {
      converged = true;
      return theta;
    }
  }
  return theta;
}

}  // namespace detail

namespace detail {

inline FitResult fit_normalized(const LinearBinomialProblem& pr, int starts) {
  const Eigen::Index d = pr.design.cols();
  // Start: least squares on the raw fractions, projected onto the bounds.
  const RVector y = pr.k.cwiseQuotient(pr.n);
  RVector x0 = pr.design.colPivHouseholderQr().solve(y);
  require(x0.allFinite(), Errc::DegenerateDesign, "design matrix is rank deficient");
  for (Eigen::Index i = 0; i < d; ++i)
    if (std::isfinite(pr.lower(i))) x0(i) = std::max(x0(i), pr.lower(i));
  RVector g;
  RMatrix H;
  detail::grad_hess(pr, x0, g, H, 0.5);
  Eigen::FullPivLU<RMatrix> lu(H);
  require(lu.rank() == d, Errc::DegenerateDesign, "Fisher information is singular");
  const RMatrix Hinv0 = lu.inverse();
  RVector scale(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    scale(i) = std::sqrt(std::abs(Hinv0(i, i)));
    if (!(scale(i) > 0.0) || !std::isfinite(scale(i))) scale(i) = std::max(1.0, std::abs(x0(i)));
  }

  detail::SimplexContext ctx{&pr, x0, scale};
  rng::Rng rng(0x5eed);
  RVector best;
  double best_f = std::numeric_limits<double>::infinity();
  bool any_converged = false;
  for (int s = 0; s < std::max(1, starts); ++s) {
    RVector z0 = RVector::Zero(d);
    if (s > 0)
      for (Eigen::Index i = 0; i < d; ++i) z0(i) = 2.0 * rng.uniform() - 1.0;
    bool conv = false;
    const RVector theta = detail::simplex_run(ctx, z0, conv);
    const double f = detail::nll(pr, theta);
    if (f < best_f) best_f = f, best = theta;
    any_converged = any_converged || conv;
  }
  bool polished = false;
  best = detail::newton_polish(pr, best, scale, polished);

  FitResult out;
  out.names = pr.names;
  out.params = best;
  bool inside = false;
  out.log_likelihood = -detail::nll(pr, best, &inside);
  require(inside && std::isfinite(out.log_likelihood), Errc::NonConvergence,
          "fit ended outside the probability domain");
  out.converged = polished || any_converged;
  require(out.converged, Errc::NonConvergence, "binomial fit did not converge");
  out.evaluations = ctx.evals;
  for (Eigen::Index i = 0; i < d; ++i)
    if (std::isfinite(pr.lower(i)) && best(i) <= pr.lower(i) + 1e-9 * scale(i)) out.boundary_hit = true;
  detail::grad_hess(pr, best, g, H);
  Eigen::FullPivLU<RMatrix> luh(H);
  if (luh.rank() == d) {
    const RMatrix c = luh.inverse();
    out.covariance = 0.5 * (c + c.transpose());
  } else {
    warn("Fisher information singular at the optimum; covariance set to NaN");
    out.covariance = RMatrix::Constant(d, d, std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

}  // namespace detail

/// Simplex multistart in scaled coordinates, Newton polish, observed-Fisher covariance.
/// Design columns are normalized to unit max-norm internally.
inline FitResult fit_linear_binomial(const LinearBinomialProblem& pr, int starts = 5) {
  gsl_set_error_handler_off();
  pr.validate();
  const Eigen::Index d = pr.design.cols();
  RVector col(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    col(j) = pr.design.col(j).cwiseAbs().maxCoeff();
    require(col(j) > 0.0, Errc::DegenerateDesign, "design column '" + pr.names[j] + "' is zero");
  }
  LinearBinomialProblem scaled = pr;
  for (Eigen::Index j = 0; j < d; ++j) {
    scaled.design.col(j) /= col(j);
    scaled.lower(j) = pr.lower(j) * col(j);
  }
  FitResult out = detail::fit_normalized(scaled, starts);
  out.params = out.params.cwiseQuotient(col);
  const RVector inv = col.cwiseInverse();
  out.covariance = inv.asDiagonal() * out.covariance * inv.asDiagonal();
  return out;
}

// ---------------------------------------------------------------------------
// Detector calibration.

struct CalibrationPoint {
  double n_inj = 0.0;
  long long k_pos = 0;
  long long n_trials = 0;
};

struct CalibrationCurve {
  std::vector<CalibrationPoint> points;
  double alpha_sq = 1.0;
};

/// k ~ Binomial(n, eta * alpha_sq * n_inj + delta); parameters (eta, delta).
inline FitResult calibrate_detector(const CalibrationCurve& curve, double alpha_sq) {
  require(alpha_sq > 0.0, Errc::InvalidArgument, "alpha_sq must be > 0");
  std::set<double> distinct;
  for (const auto& p : curve.points) {
    require(p.n_inj >= 0.0 && std::isfinite(p.n_inj), Errc::InvalidArgument, "n_inj must be >= 0");
    require(p.n_trials > 0 && p.k_pos >= 0 && p.k_pos <= p.n_trials, Errc::InvalidArgument,
            "calibration counts need 0 <= k <= n, n > 0");
    distinct.insert(p.n_inj);
  }
  require(distinct.size() >= 3, Errc::DegenerateDesign, "calibration needs >= 3 distinct n_inj values");
  const Eigen::Index m = static_cast<Eigen::Index>(curve.points.size());
  LinearBinomialProblem pr;
  pr.design = RMatrix(m, 2);
  pr.k = RVector(m);
  pr.n = RVector(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& p = curve.points[static_cast<std::size_t>(i)];
    pr.design(i, 0) = alpha_sq * p.n_inj;
    pr.design(i, 1) = 1.0;
    pr.k(i) = static_cast<double>(p.k_pos);
    pr.n(i) = static_cast<double>(p.n_trials);
  }
  pr.names = {"eta", "delta"};
  pr.lower = RVector::Constant(2, -std::numeric_limits<double>::infinity());
  return fit_linear_binomial(pr);
}

/// eta_alpha * |alpha|^2 / eta_0.
inline double enhancement_factor(double eta_alpha, double alpha_sq, double eta_0) {
  require(eta_0 > 0.0, Errc::ZeroBaseline, "baseline efficiency must be > 0");
  return eta_alpha * alpha_sq / eta_0;
}

// ---------------------------------------------------------------------------
// Global search fit.

struct SearchSeries {
  std::string label;
  double alpha_sq = 1.0;
  double eta = 1.0;
  std::vector<double> tau;
  std::vector<long long> k_pos;
  std::vector<long long> n_trials;
};

/// n_meas = a0 eta |alpha|^2 g(tau) + b tau + c per series with shared a0 >= 0.
/// Parameters: a0, then b_<label>, c_<label> per series in input order.
inline FitResult search_fit(const std::vector<SearchSeries>& series,
                            const std::function<double(double)>& g, double tau_dm = 0.0) {
  require(!series.empty(), Errc::InvalidArgument, "search fit needs at least one series");
  std::map<double, double> g_cache;
  Eigen::Index rows = 0;
  for (const auto& s : series) {
    require(s.tau.size() == s.k_pos.size() && s.tau.size() == s.n_trials.size(), Errc::DimMismatch,
            "series '" + s.label + "' has mismatched columns");
    require(std::set<double>(s.tau.begin(), s.tau.end()).size() >= 2, Errc::DegenerateDesign,
            "series '" + s.label + "' needs >= 2 distinct tau values");
    for (double t : s.tau) {
      require(t >= 0.0 && std::isfinite(t), Errc::InvalidArgument, "tau must be >= 0");
      if (tau_dm > 0.0 && t > tau_dm) warn("tau above the DM coherence time in series " + s.label);
      if (!g_cache.count(t)) g_cache[t] = g(t);
    }
    rows += static_cast<Eigen::Index>(s.tau.size());
  }
  const Eigen::Index d = 1 + 2 * static_cast<Eigen::Index>(series.size());
  LinearBinomialProblem pr;
  pr.design = RMatrix::Zero(rows, d);
  pr.k = RVector(rows);
  pr.n = RVector(rows);
  pr.names = {"a0"};
  Eigen::Index r = 0;
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    pr.names.push_back("b_" + s.label);
    pr.names.push_back("c_" + s.label);
    for (std::size_t i = 0; i < s.tau.size(); ++i, ++r) {
      pr.design(r, 0) = s.eta * s.alpha_sq * g_cache[s.tau[i]];
      pr.design(r, 1 + 2 * static_cast<Eigen::Index>(si)) = s.tau[i];
      pr.design(r, 2 + 2 * static_cast<Eigen::Index>(si)) = 1.0;
      require(s.n_trials[i] > 0 && s.k_pos[i] >= 0 && s.k_pos[i] <= s.n_trials[i],
              Errc::InvalidArgument, "search counts need 0 <= k <= n, n > 0");
      pr.k(r) = static_cast<double>(s.k_pos[i]);
      pr.n(r) = static_cast<double>(s.n_trials[i]);
    }
  }
  pr.lower = RVector::Constant(d, -std::numeric_limits<double>::infinity());
  pr.lower(0) = 0.0;
  return fit_linear_binomial(pr);
}

// ---------------------------------------------------------------------------
// Limits.

struct ExclusionPoint {
  double m_dm = 0.0;
  double epsilon0 = 0.0;
  double sigma_eps = 0.0;
  double eps90 = 0.0;
};

/// eps0 = sqrt(a0 / (rho m V)), sigma_eps = eps0 sigma_a0 / (2 a0), eps90 = eps0 + 1.28 sigma.
/// extra_rel_sq adds (sigma_w/w)^2 + (sigma_V/V)^2 under the square root.
/// a0 below sigma_a0 has no usable relative error; the limit is then sqrt((a0 + 1.28 sigma_a0) / (rho m V)).
inline ExclusionPoint epsilon_limit(double a0, double sigma_a0, double rho_m_v, double m_dm = 0.0,
                                    double extra_rel_sq = 0.0) {
  require(a0 >= 0.0 && sigma_a0 >= 0.0 && std::isfinite(a0) && std::isfinite(sigma_a0),
          Errc::InvalidArgument, "epsilon_limit needs a0 >= 0 and sigma >= 0");
  require(rho_m_v > 0.0, Errc::InvalidArgument, "rho m V must be > 0");
  ExclusionPoint e;
  e.m_dm = m_dm;
  e.epsilon0 = std::sqrt(a0 / rho_m_v);
  if (a0 < sigma_a0) {
    warn("a0 below its own uncertainty: limit taken on the a0 scale");
    e.eps90 = std::sqrt((a0 + kZ90 * sigma_a0) / rho_m_v);
    e.sigma_eps = (e.eps90 - e.epsilon0) / kZ90;
    return e;
  }
  const double rel = 0.5 * std::sqrt(std::pow(sigma_a0 / a0, 2) + extra_rel_sq);
  e.sigma_eps = e.epsilon0 * rel;
  e.eps90 = e.epsilon0 + kZ90 * e.sigma_eps;
  return e;
}

inline ExclusionPoint epsilon_limit(double a0, double sigma_a0, const dm::SearchPoint& point,
                                    const dm::HaloParams& halo) {
  return epsilon_limit(a0, sigma_a0, dm::rho_m_veff(point, halo), point.m_dm);
}

/// Limit at each mass with the cavity fixed: eps90_on * sqrt(g(m_ref) / g(m)).
inline std::vector<ExclusionPoint> off_resonance_limit(const ExclusionPoint& on,
                                                       const std::vector<double>& m_grid,
                                                       const dm::SearchPoint& point,
                                                       const dm::HaloParams& halo, double tau) {
  const double g_res = dm::g_of_t(tau, point, halo);
  require(g_res > 0.0, Errc::QuadratureFailure, "g vanishes at the reference mass");
  std::vector<ExclusionPoint> out;
  out.reserve(m_grid.size());
  for (double m : m_grid) {
    require(std::isfinite(m) && m > 0.0, Errc::InvalidArgument, "mass grid must be finite and > 0");
    const dm::SearchPoint q{m, point.omega_c, point.v_eff};
    const double g = dm::g_of_t(tau, q, halo);
    ExclusionPoint e;
    e.m_dm = m;
    if (g <= 0.0) {
      e.epsilon0 = e.sigma_eps = e.eps90 = std::numeric_limits<double>::infinity();
    } else {
      const double f = std::sqrt(g_res / g);
      e.epsilon0 = on.epsilon0 * f;
      e.sigma_eps = on.sigma_eps * f;
      e.eps90 = on.eps90 * f;
    }
    out.push_back(e);
  }
  return out;
}

/// Rows (m_dm_Hz, eps90); masses are angular in memory.
inline void write_limit_csv(std::ostream& os, const std::vector<ExclusionPoint>& pts) {
  os << "m_dm_Hz,eps90\n";
  os.precision(12);
  for (const auto& p : pts) os << p.m_dm / (2.0 * std::numbers::pi) << ',' << p.eps90 << '\n';
}

// ---------------------------------------------------------------------------
// Threshold sweeps.

struct SweepRow {
  double threshold = 0.0;
  double eta = 0.0;
  double delta = 0.0;
  double ratio = 0.0;  // delta / eta
};

/// Truth-labelled sweep: eta = positive fraction of records whose cavity
/// carried the signal sector, delta = positive fraction of the rest.
inline std::vector<SweepRow> threshold_sweep(const std::vector<double>& lambdas,
                                             const std::vector<bool>& signal,
                                             const std::vector<double>& thresholds) {
  require(lambdas.size() == signal.size(), Errc::DimMismatch, "labels and ratios differ in length");
  long long n_sig = 0;
  for (bool s : signal) n_sig += s;
  const long long n_bg = static_cast<long long>(signal.size()) - n_sig;
  std::vector<SweepRow> rows;
  for (double th : thresholds) {
    long long ps = 0, pb = 0;
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
      if (!(lambdas[i] > th)) continue;
      (signal[i] ? ps : pb) += 1;
    }
    SweepRow r;
    r.threshold = th;
    r.eta = n_sig ? static_cast<double>(ps) / n_sig : 0.0;
    r.delta = n_bg ? static_cast<double>(pb) / n_bg : 0.0;
    r.ratio = r.eta > 0.0 ? r.delta / r.eta : std::numeric_limits<double>::quiet_NaN();
    rows.push_back(r);
  }
  return rows;
}

/// Record ratios of one calibration setting.
struct CalibrationSet {
  double n_inj = 0.0;
  std::vector<double> lambdas;
  long long n_trials = 0;  // denominator; 0 means lambdas.size()
};

/// Design-fit sweep: classify each set and refit (eta, delta) per threshold.
inline std::vector<SweepRow> threshold_sweep(const std::vector<CalibrationSet>& sets, double alpha_sq,
                                             const std::vector<double>& thresholds) {
  std::vector<SweepRow> rows;
  for (double th : thresholds) {
    CalibrationCurve curve;
    curve.alpha_sq = alpha_sq;
    for (const auto& s : sets) {
      long long k = 0;
      for (double l : s.lambdas) k += l > th;
      curve.points.push_back({s.n_inj, k, s.n_trials > 0 ? s.n_trials : static_cast<long long>(s.lambdas.size())});
    }
    const FitResult f = calibrate_detector(curve, alpha_sq);
    SweepRow r{th, f.value("eta"), f.value("delta"), 0.0};
    r.ratio = r.eta != 0.0 ? r.delta / r.eta : std::numeric_limits<double>::quiet_NaN();
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Frequency-bin background subtraction.

struct FrequencyBin {
  double omega_i = 0.0;    // rad/s
  long long n_meas = 0;
  long long n_trials = 0;
  double eta = 1.0;
  double t1c = 4.6e-3;     // s, also the integration time
  double m_dm = 0.0;       // mass hypothesis (rad/s); 0 uses the search point
};

struct BinResult {
  double omega_i = 0.0;
  double m_dm = 0.0;
  double n_i = 0.0;
  double sigma_n_i = 0.0;
  double n_ref = 0.0;
  double p = 0.0;
  double sigma_p = 0.0;
  double eps90 = 0.0;        // truncated posterior in eps^2
  double eps2_90_gauss = 0.0;  // p + 1.28 sigma_p, untruncated
};

struct BackgroundResult {
  double n_bar = 0.0;
  double sigma_n = 0.0;  // trial-weighted spread across bins
  double eta_fit = 0.0;
  std::vector<BinResult> bins;
};

/// 90% quantile of a Gaussian(p, sigma) in x restricted to x >= 0; normalized
/// by quadrature and inverted by bisection.
inline double truncated_gaussian_q90(double p, double sigma) {
  require(sigma > 0.0 && std::isfinite(p), Errc::InvalidArgument, "posterior needs sigma > 0");
  const auto dens = [&](double x) { return std::exp(-0.5 * std::pow((x - p) / sigma, 2)); };
  const double hi = std::max(p, 0.0) + 40.0 * sigma;
  using GK = boost::math::quadrature::gauss_kronrod<double, 31>;
  const double lo_mode = std::clamp(p, 0.0, hi);
  const auto integral = [&](double a, double b) {
    if (b <= a) return 0.0;
    if (a < lo_mode && lo_mode < b)
      return GK::integrate(dens, a, lo_mode, 10, 1e-12) + GK::integrate(dens, lo_mode, b, 10, 1e-12);
    return GK::integrate(dens, a, b, 10, 1e-12);
  };
  const double z = integral(0.0, hi);
  require(z > 0.0 && std::isfinite(z), Errc::QuadratureFailure, "posterior normalization failed");
  const auto f = [&](double x) { return integral(0.0, x) / z - 0.9; };
  const auto r = boost::math::tools::bisect(
      f, 0.0, hi, [](double a, double b) { return std::abs(b - a) <= 1e-12 * std::max(std::abs(b), 1e-300); });
  return 0.5 * (r.first + r.second);
}

/// Response per unit eps^2 of each bin: eta_fit rho m V g(T1c_i), with the
/// mass hypothesis of the bin (or the search point) and cavity at omega_i.
inline std::vector<double> reference_response(const std::vector<FrequencyBin>& bins,
                                              const dm::SearchPoint& point, const dm::HaloParams& halo) {
  require(bins.size() >= 2, Errc::SingleBin, "background subtraction needs >= 2 bins");
  const double eta_fit = 1.0 - 1.0 / static_cast<double>(bins.size());
  std::vector<double> out;
  for (const auto& b : bins) {
    require(b.t1c > 0.0, Errc::InvalidArgument, "bin T1 must be > 0");
    const dm::SearchPoint q{b.m_dm > 0.0 ? b.m_dm : point.m_dm, b.omega_i, point.v_eff};
    out.push_back(eta_fit * dm::rho_m_veff(q, halo) * dm::g_of_t(b.t1c, q, halo));
  }
  return out;
}

/// n_i = N_meas / (eta N), trial-weighted background mean, p_i = (n_i - n_bar) / n_ref_i.
/// sigma_{n_i} is the binomial error of bin i at max(pooled raw rate, own raw rate).
inline BackgroundResult background_subtract(const std::vector<FrequencyBin>& bins,
                                            const std::vector<double>& n_ref) {
  require(bins.size() >= 2, Errc::SingleBin, "background subtraction needs >= 2 bins");
  require(n_ref.size() == bins.size(), Errc::DimMismatch, "one reference response per bin");
  BackgroundResult out;
  const double nb = static_cast<double>(bins.size());
  out.eta_fit = 1.0 - 1.0 / nb;
  double wsum = 0.0, msum = 0.0, ksum = 0.0;
  std::vector<double> n(bins.size());
  for (std::size_t i = 0; i < bins.size(); ++i) {
    const auto& b = bins[i];
    require(b.eta > 0.0, Errc::ZeroEfficiency, "bin efficiency must be > 0");
    require(b.n_trials > 0 && b.n_meas >= 0 && b.n_meas <= b.n_trials && b.t1c > 0.0,
            Errc::InvalidArgument, "bin counts or T1 invalid");
    n[i] = static_cast<double>(b.n_meas) / (b.eta * static_cast<double>(b.n_trials));
    wsum += static_cast<double>(b.n_trials);
    msum += static_cast<double>(b.n_trials) * n[i];
    ksum += static_cast<double>(b.n_meas);
  }
  out.n_bar = msum / wsum;
  double var = 0.0;
  for (std::size_t i = 0; i < bins.size(); ++i)
    var += static_cast<double>(bins[i].n_trials) * std::pow(n[i] - out.n_bar, 2);
  out.sigma_n = std::sqrt(var / wsum);
  const double pooled = std::max(ksum, 0.5) / wsum;
  for (std::size_t i = 0; i < bins.size(); ++i) {
    const auto& b = bins[i];
    BinResult r;
    r.omega_i = b.omega_i;
    r.m_dm = b.m_dm;
    r.n_i = n[i];
    const double rate = std::max(pooled, static_cast<double>(b.n_meas) / static_cast<double>(b.n_trials));
    r.sigma_n_i = std::sqrt(rate * (1.0 - rate) / static_cast<double>(b.n_trials)) / b.eta;
    r.n_ref = n_ref[i];
    if (r.n_ref > 0.0) {
      r.p = (n[i] - out.n_bar) / r.n_ref;
      r.sigma_p = r.sigma_n_i / r.n_ref;
      r.eps2_90_gauss = r.p + kZ90 * r.sigma_p;
      r.eps90 = std::sqrt(truncated_gaussian_q90(r.p, r.sigma_p));
    } else {
      r.p = 0.0;
      r.sigma_p = r.eps90 = r.eps2_90_gauss = std::numeric_limits<double>::infinity();
    }
    out.bins.push_back(r);
  }
  return out;
}

inline BackgroundResult background_subtract(const std::vector<FrequencyBin>& bins,
                                            const dm::SearchPoint& point, const dm::HaloParams& halo) {
  BackgroundResult out = background_subtract(bins, reference_response(bins, point, halo));
  for (std::size_t i = 0; i < bins.size(); ++i)
    out.bins[i].m_dm = bins[i].m_dm > 0.0 ? bins[i].m_dm : point.m_dm;
  return out;
}

// ---------------------------------------------------------------------------
// Drive-pulse calibration.

struct ZneResult {
  double p0 = 0.0, p1 = 0.0;
  double se0 = 0.0, se1 = 0.0;
};

/// Straight-line fit of each population against pulse duration; the
/// intercepts are the zero-duration estimates (negative values clipped to 0).
inline ZneResult zne_extrapolate(const std::vector<double>& durations, const std::vector<double>& p0,
                                 const std::vector<double>& p1) {
  require(durations.size() == p0.size() && durations.size() == p1.size(), Errc::DimMismatch,
          "ZNE columns differ in length");
  require(durations.size() >= 2 && std::set<double>(durations.begin(), durations.end()).size() >= 2,
          Errc::DegenerateDesign, "ZNE needs >= 2 distinct durations");
  gsl_set_error_handler_off();
  const auto fit = [&](const std::vector<double>& y, double& c0, double& se) {
    double c1, cov00, cov01, cov11, sumsq;
    gsl_fit_linear(durations.data(), 1, y.data(), 1, durations.size(), &c0, &c1, &cov00, &cov01, &cov11,
                   &sumsq);
    se = std::sqrt(std::max(0.0, cov00));
    if (c0 < 0.0) {
      warn("negative extrapolated population clipped to 0");
      c0 = 0.0;
    }
  };
  ZneResult r;
  fit(p0, r.p0, r.se0);
  fit(p1, r.p1, r.se1);
  return r;
}

/// |beta| from the Poisson ratio P1 / P0 = |beta|^2.
inline double beta_from_ratio(double p1, double p0) {
  require(p0 > 0.0, Errc::ZeroP0, "beta_from_ratio needs P0 > 0");
  require(p1 >= 0.0, Errc::InvalidArgument, "P1 must be >= 0");
  return std::sqrt(p1 / p0);
}

// ---------------------------------------------------------------------------
// JSON.

inline nlohmann::json to_json(const FitResult& f) {
  nlohmann::json j;
  nlohmann::json params = nlohmann::json::object(), sigma = nlohmann::json::object();
  for (std::size_t i = 0; i < f.names.size(); ++i) {
    params[f.names[i]] = f.params(static_cast<Eigen::Index>(i));
    sigma[f.names[i]] = f.sigma(f.names[i]);
  }
  nlohmann::json cov = nlohmann::json::array();
  for (Eigen::Index r = 0; r < f.covariance.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < f.covariance.cols(); ++c) row.push_back(f.covariance(r, c));
    cov.push_back(row);
  }
  j["names"] = f.names;
  j["params"] = params;
  j["sigma"] = sigma;
  j["covariance"] = cov;
  j["log_likelihood"] = f.log_likelihood;
  j["boundary_hit"] = f.boundary_hit;
  j["converged"] = f.converged;
  return j;
}

inline FitResult fit_from_json(const nlohmann::json& j) {
  FitResult f;
  f.names = j.at("names").get<std::vector<std::string>>();
  const auto d = static_cast<Eigen::Index>(f.names.size());
  f.params = RVector(d);
  f.covariance = RMatrix(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    f.params(i) = j.at("params").at(f.names[static_cast<std::size_t>(i)]).get<double>();
    for (Eigen::Index c = 0; c < d; ++c) f.covariance(i, c) = j.at("covariance").at(i).at(c).get<double>();
  }
  f.log_likelihood = j.at("log_likelihood").get<double>();
  f.boundary_hit = j.at("boundary_hit").get<bool>();
  f.converged = j.value("converged", true);
  return f;
}

inline nlohmann::json to_json(const ExclusionPoint& e) {
  return {{"m_dm", e.m_dm}, {"epsilon0", e.epsilon0}, {"sigma_eps", e.sigma_eps}, {"eps90", e.eps90}};
}

}  // namespace catscope::analysis
