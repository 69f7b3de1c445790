#pragma once

// Initial-sector posteriors from readout records by a log-domain backward
// path sum, likelihood ratios, thresholding and leakage post-selection.

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "catscope/error.hpp"
#include "catscope/measurement.hpp"

namespace catscope::hmm {

using fock::RMatrix;
using fock::RVector;
using measurement::ProbeMode;
using measurement::ReadoutRecord;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct HmmModel {
  RMatrix transition;  // hidden x hidden, row-stochastic
  RMatrix emission;    // hidden x symbol (G, E)
  RVector prior;       // over hidden states
  std::vector<std::string> labels;
  int sectors = 4;     // hidden index = 2 * sector + qubit
  int signal_sector = 1;

  void validate() const {
    const Eigen::Index n = transition.rows();
    require(transition.cols() == n && emission.rows() == n && prior.size() == n &&
                n == 2 * sectors && emission.cols() == 2,
            Errc::DimMismatch, "HMM dimensions inconsistent");
    require(std::abs(prior.sum() - 1.0) < 1e-12, Errc::InvalidArgument, "prior must sum to 1");
    require(transition.minCoeff() >= 0.0 && emission.minCoeff() >= 0.0 && prior.minCoeff() >= 0.0,
            Errc::NegativeProbability, "HMM has negative entries");
  }
};

/// Model from device parameters; uniform prior over both qubit values of every sector.
inline HmmModel make_model(const measurement::DeviceParams& device, double alpha_sq,
                           ProbeMode mode) {
  HmmModel m;
  m.sectors = measurement::sector_count(mode);
  m.transition = measurement::build_transition_matrix(device, alpha_sq, mode);
  m.emission = measurement::build_emission_matrix(device, mode);
  m.prior = RVector::Constant(2 * m.sectors, 1.0 / (2 * m.sectors));
  for (int j = 0; j < m.sectors; ++j) {
    const std::string cav = mode == ProbeMode::Compass ? "phi" + std::to_string(j) : std::to_string(j);
    m.labels.push_back(cav + "g");
    m.labels.push_back(cav + "e");
  }
  return m;
}

struct Posterior {
  RVector p_phi;     // normalized per initial sector
  RVector log_phi;   // unnormalized log path sums
  double lambda = 0.0;
};

namespace detail {

inline double logsumexp(const double* v, int n) {
  double mx = kNegInf;
  for (int i = 0; i < n; ++i) mx = std::max(mx, v[i]);
  if (mx == kNegInf) return kNegInf;
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(v[i] - mx);
  return mx + std::log(s);
}

inline double safe_log(double x) { return x > 0.0 ? std::log(x) : kNegInf; }

}  // namespace detail

/// log P(S0 -> sector) path sums; empty record gives the prior.
inline Posterior forward_backward(const HmmModel& model, const std::vector<std::uint8_t>& symbols) {
  model.validate();
  const int n = static_cast<int>(model.transition.rows());
  for (auto s : symbols) {
    require(s != measurement::kLeak, Errc::LeakageSymbol, "record contains leakage; post-select first");
    require(s <= 1, Errc::InvalidArgument, "unknown symbol");
  }
  std::vector<double> logT(n * n), logE(n * 2);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < n; ++k) logT[i * n + k] = detail::safe_log(model.transition(i, k));
    for (int r = 0; r < 2; ++r) logE[i * 2 + r] = detail::safe_log(model.emission(i, r));
  }
  // beta_t(i) = log sum over S_{t+1..N} of T E ... ; beta_N = 0.
  std::vector<double> beta(n, 0.0), next(n), tmp(n);
  const int N = static_cast<int>(symbols.size());
  for (int t = N - 1; t >= 1; --t) {
    const int r = symbols[t];
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < n; ++k) tmp[k] = logT[i * n + k] + logE[k * 2 + r] + beta[k];
      next[i] = detail::logsumexp(tmp.data(), n);
    }
    beta.swap(next);
  }
  Posterior post;
  post.log_phi = RVector::Constant(model.sectors, kNegInf);
  for (int j = 0; j < model.sectors; ++j) {
    double terms[2];
    for (int q = 0; q < 2; ++q) {
      const int i = 2 * j + q;
      terms[q] = detail::safe_log(model.prior(i)) + (N > 0 ? logE[i * 2 + symbols[0]] + beta[i] : 0.0);
    }
    post.log_phi(j) = detail::logsumexp(terms, 2);
  }
  const double total = detail::logsumexp(post.log_phi.data(), model.sectors);
  require(total > kNegInf, Errc::NonFinite, "record has zero likelihood under the model");
  post.p_phi = RVector(model.sectors);
  for (int j = 0; j < model.sectors; ++j) post.p_phi(j) = std::exp(post.log_phi(j) - total);
  // lambda from logs for dynamic range
  std::vector<double> others;
  for (int j = 0; j < model.sectors; ++j)
    if (j != model.signal_sector) others.push_back(post.log_phi(j));
  const double denom = detail::logsumexp(others.data(), static_cast<int>(others.size()));
  const double num = post.log_phi(model.signal_sector);
  if (denom == kNegInf)
    post.lambda = num == kNegInf ? 0.0 : std::numeric_limits<double>::infinity();
  else
    post.lambda = num == kNegInf ? 0.0 : std::exp(num - denom);
  return post;
}

inline Posterior forward_backward(const HmmModel& model, const ReadoutRecord& record) {
  return forward_backward(model, record.symbols);
}

/// Compass: P(phi1) / (P(phi0) + P(phi2) + P(phi3)); vacuum: P(1) / P(0).
/// Zero denominator gives +inf.
inline double likelihood_ratio(const Posterior& post, ProbeMode mode) {
  const RVector& p = post.p_phi;
  const double num = p(1);
  const double den = mode == ProbeMode::Compass ? p(0) + p(2) + p(3) : p(0);
  if (den <= 0.0) return num > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  return num / den;
}

/// Strictly above threshold is positive.
inline bool classify(double lambda, double threshold) {
  require(threshold > 0.0, Errc::InvalidArgument, "threshold must be > 0");
  return lambda > threshold;
}

/// Normalized signal-sector cut 1 / (1 + lambda_thresh).
inline double signal_cut(double threshold) { return 1.0 / (1.0 + threshold); }

struct PostselectResult {
  std::vector<ReadoutRecord> kept;
  long long dropped = 0;
};

inline PostselectResult postselect(const std::vector<ReadoutRecord>& records) {
  PostselectResult out;
  for (const auto& r : records) {
    if (r.has_leakage())
      ++out.dropped;
    else
      out.kept.push_back(r);
  }
  return out;
}

/// Likelihood ratios of every record (leakage records get NaN).
inline std::vector<double> record_lambdas(const HmmModel& model, const std::vector<ReadoutRecord>& records) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records)
    out.push_back(r.has_leakage() ? std::numeric_limits<double>::quiet_NaN()
                                  : forward_backward(model, r).lambda);
  return out;
}

/// Rows (trial_id, P(phi_0..), lambda, class).
inline void write_posterior_csv(std::ostream& os, const HmmModel& model,
                                const std::vector<ReadoutRecord>& records, double threshold) {
  os << "trial_id";
  for (int j = 0; j < model.sectors; ++j) os << ",p" << j;
  os << ",lambda,class\n";
  os.precision(17);
  for (const auto& r : records) {
    if (r.has_leakage()) continue;
    const Posterior p = forward_backward(model, r);
    os << r.trial_id;
    for (int j = 0; j < model.sectors; ++j) os << ',' << p.p_phi(j);
    os << ',' << p.lambda << ',' << (classify(p.lambda, threshold) ? "positive" : "negative") << '\n';
  }
}

}  // namespace catscope::hmm
