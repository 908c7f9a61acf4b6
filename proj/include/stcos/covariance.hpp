#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "stcos/error.hpp"
#include "stcos/geometry.hpp"

namespace stcos {

/// Leading eigenvectors of P W P restricted to the orthogonal complement of span(H).
struct MIPropagator {
  Eigen::MatrixXd basis;        // n_B x rank, orthonormal columns, H' basis = 0
  Eigen::VectorXd eigenvalues;  // rank, descending
  std::size_t rank() const { return static_cast<std::size_t>(basis.cols()); }
};

/// Moran's I propagator basis. `weights` is symmetrized (x'Wx only sees the symmetric part).
/// The eigenproblem is solved in an orthonormal basis of the complement, so no eigenvector
/// from span(H) can enter even when W has negative eigenvalues.
inline MIPropagator mi_propagator(const Eigen::MatrixXd& design, const Eigen::MatrixXd& weights, std::size_t rank) {
  const Eigen::Index n = design.rows();
  const Eigen::Index p = design.cols();
  if (weights.rows() != n || weights.cols() != n) throw ConfigurationError("weight matrix must be n_B x n_B");
  if (p < 1) throw ConfigurationError("design matrix needs at least one column");
  if (static_cast<Eigen::Index>(rank) > n - p) throw ConfigurationError("propagator rank exceeds n_B - p");

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) throw LinearAlgebraError("design matrix H is rank deficient");

  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd complement = q.rightCols(n - p);
  Eigen::MatrixXd sym = 0.5 * (weights + weights.transpose());
  Eigen::MatrixXd reduced = complement.transpose() * sym * complement;
  reduced = 0.5 * (reduced + reduced.transpose());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(reduced);
  if (eig.info() != Eigen::Success) throw LinearAlgebraError("eigendecomposition of P W P failed");

  // Eigen returns ascending order; take the top `rank`.
  const Eigen::Index k = static_cast<Eigen::Index>(rank);
  MIPropagator out;
  out.eigenvalues = eig.eigenvalues().tail(k).reverse();
  out.basis = complement * eig.eigenvectors().rightCols(k).rowwise().reverse();
  // Fix column signs so the largest-magnitude entry is positive.
  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::Index at;
    out.basis.col(c).cwiseAbs().maxCoeff(&at);
    if (out.basis(at, c) < 0.0) out.basis.col(c) *= -1.0;
  }
  return out;
}

/// VAR(1) propagator on the fine set: scale * Phi diag(lambda / max|lambda|) Phi'.
/// The raw projector has spectral radius 1, so `scale` < 1 is what makes the process stationary.
inline Eigen::MatrixXd var_propagator(const MIPropagator& mi, double scale) {
  if (mi.rank() == 0) return Eigen::MatrixXd::Zero(mi.basis.rows(), mi.basis.rows());
  double top = mi.eigenvalues.cwiseAbs().maxCoeff();
  if (!(top > 1e-12)) throw ConfigurationError("propagator eigenvalues are all zero; choose another weight matrix");
  Eigen::VectorXd w = mi.eigenvalues / top;
  return scale * mi.basis * w.asDiagonal() * mi.basis.transpose();
}

/// Innovation covariance of b_t at unit sigma_K^2: inverse of I - rho * D^{-1/2} A D^{-1/2}.
struct InnovationCov {
  Eigen::MatrixXd precision;
  Eigen::MatrixXd covariance;
};

inline InnovationCov innovation_cov(const AdjacencyMatrix& adjacency, double rho) {
  if (!(std::abs(rho) < 1.0)) throw ConfigurationError("rho must satisfy |rho| < 1");
  const auto n = static_cast<Eigen::Index>(adjacency.size());
  Eigen::VectorXd inv_sqrt_deg(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto d = adjacency.degree(static_cast<std::size_t>(i));
    inv_sqrt_deg[i] = d > 0 ? 1.0 / std::sqrt(static_cast<double>(d)) : 0.0;
  }
  InnovationCov out;
  out.precision = Eigen::MatrixXd::Identity(n, n) -
                  rho * inv_sqrt_deg.asDiagonal() * adjacency.matrix() * inv_sqrt_deg.asDiagonal();
  Eigen::LLT<Eigen::MatrixXd> llt(out.precision);
  if (llt.info() != Eigen::Success) throw LinearAlgebraError("innovation precision is not positive definite");
  out.covariance = llt.solve(Eigen::MatrixXd::Identity(n, n));
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
  return out;
}

inline double spectral_radius(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  Eigen::EigenSolver<Eigen::MatrixXd> es(m, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

inline double min_eigenvalue_ratio(const Eigen::MatrixXd& sym) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym, Eigen::EigenvaluesOnly);
  double top = eig.eigenvalues().cwiseAbs().maxCoeff();
  return top > 0.0 ? eig.eigenvalues().minCoeff() / top : 0.0;
}

struct StationaryOptions {
  Eigen::Index direct_limit = 30;  // Kronecker solve up to this n_B
  double tolerance = 1e-12;
  int max_doublings = 200;
};

/// Sigma0 solving Sigma0 = M Sigma0 M' + Sigma_b.
///
/// Small systems solve vec(Sigma0) = (I - M (x) M)^{-1} vec(Sigma_b) directly. Larger ones
/// use the doubling form of the fixed-point iteration (Smith's method), which reaches the
/// 2^k-th partial sum of the series after k steps.
inline Eigen::MatrixXd stationary_cov(const Eigen::MatrixXd& m, const Eigen::MatrixXd& sigma_b,
                                      const StationaryOptions& opt = {}) {
  const Eigen::Index n = m.rows();
  if (m.cols() != n || sigma_b.rows() != n || sigma_b.cols() != n)
    throw ConfigurationError("stationary_cov: dimension mismatch");
  if (!((sigma_b - sigma_b.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * std::max(1.0, sigma_b.cwiseAbs().maxCoeff())))
    throw DomainError("innovation covariance is not symmetric");
  if (min_eigenvalue_ratio(sigma_b) < -1e-10) throw DomainError("innovation covariance is not positive semi-definite");
  double radius = spectral_radius(m);
  if (!(radius < 1.0)) throw StabilityError("propagator spectral radius " + std::to_string(radius) + " >= 1");

  Eigen::MatrixXd sigma;
  if (n <= opt.direct_limit) {
    const Eigen::Index nn = n * n;
    Eigen::MatrixXd system = Eigen::MatrixXd::Identity(nn, nn);
    // Column-major vec: entry (j*n+i, l*n+k) of M (x) M is M(i,k) * M(j,l).
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index l = 0; l < n; ++l) {
        double mjl = m(j, l);
        if (mjl == 0.0) continue;
        system.block(j * n, l * n, n, n) -= mjl * m;
      }
    Eigen::VectorXd rhs = Eigen::Map<const Eigen::VectorXd>(sigma_b.data(), nn);
    Eigen::VectorXd vec = system.partialPivLu().solve(rhs);
    sigma = Eigen::Map<Eigen::MatrixXd>(vec.data(), n, n);
  } else {
    sigma = sigma_b;
    Eigen::MatrixXd power = m;
    for (int step = 0; step < opt.max_doublings; ++step) {
      Eigen::MatrixXd increment = power * sigma * power.transpose();
      sigma += increment;
      power = power * power;
      if (increment.norm() <= opt.tolerance * sigma.norm()) break;
    }
  }
  return 0.5 * (sigma + sigma.transpose());
}

/// Joint covariance of the stacked target process over `years` periods: block (s, t) for
/// s >= t is M^(s-t) Sigma0, and the upper blocks are their transposes.
inline Eigen::MatrixXd assemble_joint(const Eigen::MatrixXd& m, const Eigen::MatrixXd& sigma0, int years) {
  if (years < 1) throw ConfigurationError("assemble_joint needs at least one period");
  const Eigen::Index n = sigma0.rows();
  Eigen::MatrixXd joint(n * years, n * years);
  Eigen::MatrixXd lag = sigma0;
  for (int tau = 0; tau < years; ++tau) {
    for (int t = 0; t + tau < years; ++t) {
      joint.block((t + tau) * n, t * n, n, n) = lag;
      joint.block(t * n, (t + tau) * n, n, n) = lag.transpose();
    }
    lag = m * lag;
  }
  return joint;
}

/// Base covariance K_0 of the random effects; the model uses K = sigma_K^2 * K_0.
struct RandomEffectsCov {
  Eigen::MatrixXd base;         // r x r symmetric PSD
  Eigen::VectorXd eigenvalues;  // floored at zero, ascending
  Eigen::MatrixXd eigenvectors;
  double floor_ratio = 1e-8;    // eigenvalues below floor_ratio * max are treated as zero

  Eigen::Index dimension() const { return base.rows(); }

  Eigen::Index rank() const {
    double top = eigenvalues.size() ? eigenvalues.maxCoeff() : 0.0;
    return (eigenvalues.array() > floor_ratio * top).count();
  }

  /// L (r x rank) with L L' = K_0 over the retained eigenvalues.
  Eigen::MatrixXd factor() const {
    const Eigen::Index k = rank();
    return eigenvectors.rightCols(k) * eigenvalues.tail(k).cwiseSqrt().asDiagonal();
  }

  Eigen::MatrixXd pseudo_inverse() const {
    const Eigen::Index k = rank();
    return eigenvectors.rightCols(k) * eigenvalues.tail(k).cwiseInverse().asDiagonal() *
           eigenvectors.rightCols(k).transpose();
  }

  double log_pseudo_determinant() const { return eigenvalues.tail(rank()).array().log().sum(); }
};

inline RandomEffectsCov make_random_effects_cov(const Eigen::MatrixXd& k0, double floor_ratio = 1e-8) {
  Eigen::MatrixXd sym = 0.5 * (k0 + k0.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  if (eig.info() != Eigen::Success) throw LinearAlgebraError("eigendecomposition of K_0 failed");
  RandomEffectsCov out;
  out.floor_ratio = floor_ratio;
  out.eigenvalues = eig.eigenvalues().cwiseMax(0.0);
  out.eigenvectors = eig.eigenvectors();
  out.base = out.eigenvectors * out.eigenvalues.asDiagonal() * out.eigenvectors.transpose();
  out.base = 0.5 * (out.base + out.base.transpose());
  return out;
}

/// Frobenius-optimal PSD C minimizing ||Sigma - Psi C Psi'||_F.
///
/// With the thin SVD Psi = U S V' the objective splits as ||U'Sigma U - D||_F plus a constant,
/// where D = S V'C V S ranges over all PSD matrices exactly when C does. The optimum floors the
/// negative eigenvalues of U'Sigma U (the Higham approximant) and maps back through the
/// pseudo-inverse; null-space directions of Psi get zero. When Sigma is PSD this equals
/// Psi^+ Sigma Psi^+'.
inline RandomEffectsCov solve_k0(const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& psi,
                                 double rank_tolerance = 1e-10) {
  if (psi.rows() != sigma.rows() || sigma.rows() != sigma.cols())
    throw ConfigurationError("solve_K0: Sigma must be square with as many rows as Psi");
  if (psi.cwiseAbs().maxCoeff() == 0.0) throw ConfigurationError("solve_K0: Psi has no nonzero column");

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(psi, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  const double cutoff = rank_tolerance * s[0];
  Eigen::Index k = 0;
  while (k < s.size() && s[k] > cutoff) ++k;

  Eigen::MatrixXd u = svd.matrixU().leftCols(k);
  Eigen::MatrixXd v = svd.matrixV().leftCols(k);
  Eigen::MatrixXd projected = u.transpose() * sigma * u;
  projected = 0.5 * (projected + projected.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(projected);
  Eigen::MatrixXd floored =
      eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).asDiagonal() * eig.eigenvectors().transpose();
  Eigen::MatrixXd back = v * s.head(k).cwiseInverse().asDiagonal();
  return make_random_effects_cov(back * floored * back.transpose());
}

}  // namespace stcos
