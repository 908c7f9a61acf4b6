#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "stcos/basis.hpp"
#include "stcos/covariance.hpp"
#include "stcos/error.hpp"

namespace stcos {

/// One published estimate with its known sampling standard deviation.
struct SurveyDatum {
  std::string unit_id;
  int year = 0;
  int period = 1;
  double estimate = 0.0;
  double sd = 1.0;

  auto key() const { return std::tie(unit_id, year, period); }
};

inline void validate_data(std::span<const SurveyDatum> data) {
  std::set<std::tuple<std::string, int, int>> seen;
  for (const auto& d : data) {
    if (!(d.sd > 0.0) || !std::isfinite(d.sd))
      throw DomainError("datum (" + d.unit_id + ", " + std::to_string(d.year) + ", " + std::to_string(d.period) +
                        ") has nonpositive or non-finite sd");
    if (d.period < 1) throw ConfigurationError("datum for '" + d.unit_id + "' has period < 1");
    if (!std::isfinite(d.estimate)) throw DomainError("datum for '" + d.unit_id + "' has a non-finite estimate");
    if (!seen.emplace(d.unit_id, d.year, d.period).second)
      throw ConfigurationError("duplicate datum (" + d.unit_id + ", " + std::to_string(d.year) + ", " +
                               std::to_string(d.period) + ")");
  }
}

struct InverseGammaPrior {
  double shape = 1.0;
  double scale = 1.0;

  double log_density(double x) const {
    return shape * std::log(scale) - std::lgamma(shape) - (shape + 1.0) * std::log(x) - scale / x;
  }
};

struct Priors {
  InverseGammaPrior sigma2_xi;
  InverseGammaPrior sigma2_k;
  InverseGammaPrior sigma2_mu;

  void validate() const {
    for (const auto* p : {&sigma2_xi, &sigma2_k, &sigma2_mu})
      if (!(p->shape > 0.0) || !(p->scale > 0.0)) throw ConfigurationError("inverse-gamma shape and scale must be > 0");
  }
};

struct BasisSettings {
  std::size_t spatial_knots = 5;
  std::size_t knot_candidates = 2000;
  std::uint64_t knot_seed = 17;
  double spatial_radius_multiplier = 1.1;
  std::optional<double> spatial_radius;  // overrides the multiplier when set
  double temporal_radius = 1.1;
  std::vector<double> temporal_knots;    // explicit knots; empty means period midpoints
  std::size_t temporal_knot_count = 0;   // > 0: evenly spaced over the year range instead
  std::size_t mc_points = 1000;
};

struct CovarianceSettings {
  double rho = 0.9;
  double propagator_scale = 0.8;
  std::size_t propagator_rank = 0;  // 0 means n_B - 1
};

struct ChainSettings {
  long iterations = 10000;
  long burn_in = 2000;
  long thin = 4;
  std::uint64_t seed = 1;

  void validate() const {
    if (burn_in < 0 || iterations < burn_in) throw ConfigurationError("need iterations >= burn_in >= 0");
    if (thin < 1) throw ConfigurationError("thin must be at least 1");
  }
};

struct ModelConfig {
  Priors priors;
  BasisSettings basis;
  CovarianceSettings covariance;
  ChainSettings chain;
  unsigned threads = 1;

  void validate() const {
    priors.validate();
    chain.validate();
    if (basis.spatial_knots == 0) throw ConfigurationError("need at least one spatial knot");
    if (basis.mc_points == 0) throw ConfigurationError("mc_points must be positive");
    if (!(basis.temporal_radius > 0.0)) throw ConfigurationError("temporal radius must be positive");
    if (!(std::abs(covariance.rho) < 1.0)) throw ConfigurationError("rho must satisfy |rho| < 1");
    if (!(covariance.propagator_scale >= 0.0 && covariance.propagator_scale < 1.0))
      throw ConfigurationError("propagator_scale must lie in [0, 1)");
  }
};

/// Unknowns of the process model.
struct ProcessParams {
  Eigen::VectorXd mu;   // n_B fine-scale trend
  Eigen::VectorXd eta;  // r random effects
  Eigen::VectorXd xi;   // N fine-scale errors, one per datum
  double sigma2_xi = 1.0;
  double sigma2_k = 1.0;
  double sigma2_mu = 1.0;

  bool variances_valid() const {
    return sigma2_xi > 0.0 && sigma2_k > 0.0 && sigma2_mu > 0.0 && std::isfinite(sigma2_xi) &&
           std::isfinite(sigma2_k) && std::isfinite(sigma2_mu);
  }
  bool finite() const {
    return variances_valid() && mu.allFinite() && eta.allFinite() && xi.allFinite();
  }
};

/// Stacked data-model inputs: Z, diag(V), overlap rows H, basis rows Psi, and K_0.
struct FittedModelInputs {
  std::vector<SurveyDatum> data;
  Eigen::VectorXd z;
  Eigen::VectorXd variance;
  Eigen::MatrixXd overlap;  // N x n_B
  Eigen::MatrixXd psi;      // N x r
  RandomEffectsCov k0;

  Eigen::Index observations() const { return z.size(); }
  Eigen::Index fine_units() const { return overlap.cols(); }
  Eigen::Index basis_size() const { return psi.cols(); }
};

inline FittedModelInputs assemble(std::span<const SurveyDatum> data, std::span<const DesignRow> designs,
                                  const RandomEffectsCov& k0, Eigen::Index fine_units) {
  if (data.size() != designs.size()) throw ConfigurationError("one design row per datum is required");
  validate_data(data);
  const auto n = static_cast<Eigen::Index>(data.size());
  const Eigen::Index r = k0.dimension();

  FittedModelInputs out;
  out.data.assign(data.begin(), data.end());
  out.z.resize(n);
  out.variance.resize(n);
  out.overlap.resize(n, fine_units);
  out.psi.resize(n, r);
  out.k0 = k0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& d = data[static_cast<std::size_t>(i)];
    const auto& row = designs[static_cast<std::size_t>(i)];
    if (row.unit_id != d.unit_id || row.year != d.year || row.period != d.period)
      throw ConfigurationError("design row " + std::to_string(i) + " is not aligned with its datum");
    if (row.psi.size() != r || row.overlap.size() != fine_units)
      throw ConfigurationError("design row " + std::to_string(i) + " has the wrong dimensions");
    out.z[i] = d.estimate;
    out.variance[i] = d.sd * d.sd;
    out.overlap.row(i) = row.overlap.transpose();
    out.psi.row(i) = row.psi.transpose();
  }
  return out;
}

inline FittedModelInputs assemble(std::span<const SurveyDatum> data, std::span<const DesignRow> designs,
                                  const RandomEffectsCov& k0) {
  Eigen::Index nb = designs.empty() ? 0 : designs.front().overlap.size();
  return assemble(data, designs, k0, nb);
}

namespace detail {
inline constexpr double log_two_pi = 1.8378770664093454835606594728112;

inline double normal_log_density(double x, double mean, double variance) {
  double d = x - mean;
  return -0.5 * (log_two_pi + std::log(variance) + d * d / variance);
}
}  // namespace detail

/// log N(Z; H mu + Psi eta, V + sigma_xi^2 I), with the fine-scale errors integrated out.
inline double collapsed_log_density(const FittedModelInputs& in, const Eigen::VectorXd& mu, const Eigen::VectorXd& eta,
                                    double sigma2_xi) {
  Eigen::VectorXd mean = in.overlap * mu + in.psi * eta;
  double total = 0.0;
  for (Eigen::Index i = 0; i < in.observations(); ++i)
    total += detail::normal_log_density(in.z[i], mean[i], in.variance[i] + sigma2_xi);
  return total;
}

/// Joint log density of data and all unknowns (up to nothing: every normalizing constant is kept).
/// The eta term uses the pseudo-inverse and pseudo-determinant of K_0 on its rank.
inline double log_joint(const ProcessParams& p, const FittedModelInputs& in, const Priors& priors) {
  if (!p.variances_valid()) throw DomainError("log_joint: variances must be positive and finite");
  if (p.mu.size() != in.fine_units() || p.eta.size() != in.basis_size() || p.xi.size() != in.observations())
    throw ConfigurationError("log_joint: parameter dimensions do not match the inputs");

  Eigen::VectorXd mean = in.overlap * p.mu + in.psi * p.eta + p.xi;
  double total = 0.0;
  for (Eigen::Index i = 0; i < in.observations(); ++i)
    total += detail::normal_log_density(in.z[i], mean[i], in.variance[i]);
  for (Eigen::Index i = 0; i < p.xi.size(); ++i) total += detail::normal_log_density(p.xi[i], 0.0, p.sigma2_xi);
  for (Eigen::Index i = 0; i < p.mu.size(); ++i) total += detail::normal_log_density(p.mu[i], 0.0, p.sigma2_mu);

  const auto rank = static_cast<double>(in.k0.rank());
  double quad = p.eta.dot(in.k0.pseudo_inverse() * p.eta);
  total += -0.5 * (rank * (detail::log_two_pi + std::log(p.sigma2_k)) + in.k0.log_pseudo_determinant() +
                   quad / p.sigma2_k);

  total += priors.sigma2_xi.log_density(p.sigma2_xi);
  total += priors.sigma2_k.log_density(p.sigma2_k);
  total += priors.sigma2_mu.log_density(p.sigma2_mu);
  return total;
}

}  // namespace stcos
