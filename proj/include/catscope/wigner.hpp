#pragma once

// Wigner function W(z) = (2/pi) Tr[P D^dag(z) rho D(z)], evaluated by
// displacing each eigenvector of rho and weighting populations by (-1)^n.

#include <cmath>
#include <numbers>
#include <ostream>
#include <vector>

#include "catscope/fock.hpp"

namespace catscope::fock {

struct WignerField {
  PhaseGrid grid;
  RMatrix values;  // values(k, i): Im index k, Re index i

  double at(int re_index, int im_index) const { return values(im_index, re_index); }

  /// Riemann sum over the grid.
  double integral() const { return values.sum() * grid.re_step() * grid.im_step(); }

  /// Integral over Im z for each Re z sample.
  RVector re_marginal() const {
    return values.colwise().sum().transpose() * grid.im_step();
  }
};

namespace detail {

inline double displaced_parity(const CVector& psi, cplx z) {
  const CVector shifted = apply_displacement(-z, psi);
  const Eigen::Index dim = shifted.size();
  const Eigen::Index guard = std::max<Eigen::Index>(2, dim / 20);
  require(shifted.tail(guard).squaredNorm() < kTailTolerance, Errc::TruncationTooSmall,
          "wigner: displaced state reaches the truncation edge");
  double acc = 0.0;
  for (Eigen::Index n = 0; n < dim; ++n) acc += ((n % 2 == 0) ? 1.0 : -1.0) * std::norm(shifted(n));
  return acc;
}

inline WignerField wigner_mixture(const std::vector<std::pair<double, CVector>>& mixture,
                                  double mean_photons, int dim, const PhaseGrid& grid) {
  grid.validate();
  const int work_dim =
      std::max(dim, recommended_dim(std::sqrt(std::max(mean_photons, 0.0)) + grid.max_abs()) + 8);
  WignerField field{grid, RMatrix::Zero(grid.im_count, grid.re_count)};
  for (const auto& [weight, vec] : mixture) {
    CVector padded = CVector::Zero(work_dim);
    padded.head(vec.size()) = vec;
    for (int k = 0; k < grid.im_count; ++k) {
      for (int i = 0; i < grid.re_count; ++i) {
        field.values(k, i) +=
            weight * detail::displaced_parity(padded, cplx(grid.re_at(i), grid.im_at(k)));
      }
    }
  }
  field.values *= 2.0 / std::numbers::pi;
  return field;
}

}  // namespace detail

inline WignerField wigner(const StateVector& psi, const PhaseGrid& grid) {
  return detail::wigner_mixture({{1.0, psi.amps()}}, psi.mean_photon_number(), psi.dim(), grid);
}

inline WignerField wigner(const DensityMatrix& rho, const PhaseGrid& grid) {
  Eigen::SelfAdjointEigenSolver<CMatrix> solver(rho.matrix());
  std::vector<std::pair<double, CVector>> mixture;
  for (Eigen::Index k = 0; k < solver.eigenvalues().size(); ++k) {
    const double w = solver.eigenvalues()(k);
    if (w > 1e-14) mixture.emplace_back(w, solver.eigenvectors().col(k));
  }
  return detail::wigner_mixture(mixture, rho.mean_photon_number(), rho.dim(), grid);
}

/// Single-point evaluation.
inline double wigner_at(const StateVector& psi, cplx z) {
  const int work_dim = std::max(
      psi.dim(), recommended_dim(std::sqrt(psi.mean_photon_number()) + std::abs(z)) + 8);
  return 2.0 / std::numbers::pi * detail::displaced_parity(psi.padded(work_dim).amps(), z);
}

/// Rows (Re z, Im z, W), row-major over the grid (Im outer, Re inner).
inline void write_wigner_csv(std::ostream& os, const WignerField& field) {
  os << "re_z,im_z,w\n";
  os.precision(17);
  for (int k = 0; k < field.grid.im_count; ++k) {
    for (int i = 0; i < field.grid.re_count; ++i) {
      os << field.grid.re_at(i) << ',' << field.grid.im_at(k) << ',' << field.values(k, i) << '\n';
    }
  }
}

}  // namespace catscope::fock
