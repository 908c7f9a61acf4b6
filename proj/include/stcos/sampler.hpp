#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stcos/error.hpp"
#include "stcos/model.hpp"
#include "stcos/rng.hpp"

namespace stcos {

struct ParameterSummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  double ess = 0.0;
  double split_rhat = 1.0;
};

/// Stored post-burn-in, thinned Gibbs draws.
struct PosteriorDraws {
  std::vector<ProcessParams> records;
  std::uint64_t seed = 0;
  std::string config_hash;
  long iterations = 0;
  long burn_in = 0;
  long thin = 1;
  std::vector<ParameterSummary> diagnostics;
  std::vector<std::string> warnings;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

inline double draw_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

/// Draw from IG(shape, scale) as scale / Gamma(shape, 1).
inline double draw_inverse_gamma(Rng& rng, double shape, double scale) {
  double g = std::gamma_distribution<double>(shape, 1.0)(rng);
  return scale / g;
}

struct GaussianConditional {
  Eigen::VectorXd mean;
  Eigen::MatrixXd precision;
};

/// Fully conjugate Gibbs sampler over (mu_B, eta, xi, sigma_xi^2, sigma_K^2, sigma_mu^2).
///
/// eta is drawn through its coordinates on the retained eigenvectors of K_0
/// (eta = L alpha, alpha ~ N(0, sigma_K^2 I) a priori), which is the pseudo-inverse prior
/// precision restricted to the rank of K_0.
class GibbsSampler {
public:
  GibbsSampler(const FittedModelInputs& inputs, Priors priors) : in_(inputs), priors_(priors) {
    priors_.validate();
    factor_ = in_.k0.factor();
    precision_w_ = in_.variance.cwiseInverse();
    psi_factor_ = in_.psi * factor_;
    eta_gram_ = psi_factor_.transpose() * precision_w_.asDiagonal() * psi_factor_;
    mu_gram_ = in_.overlap.transpose() * precision_w_.asDiagonal() * in_.overlap;
    cross_gram_ = in_.overlap.transpose() * precision_w_.asDiagonal() * psi_factor_;
  }

  const FittedModelInputs& inputs() const { return in_; }
  Eigen::Index effects_rank() const { return factor_.cols(); }

  ProcessParams initial_state() const {
    ProcessParams p;
    p.mu = Eigen::VectorXd::Zero(in_.fine_units());
    p.eta = Eigen::VectorXd::Zero(in_.basis_size());
    p.xi = Eigen::VectorXd::Zero(in_.observations());
    p.sigma2_xi = 1.0;
    p.sigma2_k = 1.0;
    p.sigma2_mu = 1.0 + (in_.observations() > 0 ? in_.z.squaredNorm() / static_cast<double>(in_.observations()) : 0.0);
    return p;
  }

  /// Full conditional of eta in the coordinates alpha (eta = L alpha).
  GaussianConditional effects_conditional(const ProcessParams& s) const {
    Eigen::VectorXd resid = in_.z - in_.overlap * s.mu - s.xi;
    GaussianConditional c;
    c.precision = eta_gram_;
    c.precision.diagonal().array() += 1.0 / s.sigma2_k;
    Eigen::VectorXd rhs = psi_factor_.transpose() * precision_w_.cwiseProduct(resid);
    c.mean = solve(c.precision, rhs, "eta", s);
    return c;
  }

  /// Conditional mean of eta itself.
  Eigen::VectorXd eta_conditional_mean(const ProcessParams& s) const { return factor_ * effects_conditional(s).mean; }

  GaussianConditional trend_conditional(const ProcessParams& s) const {
    Eigen::VectorXd resid = in_.z - in_.psi * s.eta - s.xi;
    GaussianConditional c;
    c.precision = mu_gram_;
    c.precision.diagonal().array() += 1.0 / s.sigma2_mu;
    Eigen::VectorXd rhs = in_.overlap.transpose() * precision_w_.cwiseProduct(resid);
    c.mean = solve(c.precision, rhs, "mu_B", s);
    return c;
  }

  /// Joint full conditional of (mu_B, alpha). The trend and the basis effects can both
  /// carry the overall level, so updating them one at a time mixes very slowly.
  GaussianConditional joint_conditional(const ProcessParams& s) const {
    const Eigen::Index nb = in_.fine_units();
    const Eigen::Index k = factor_.cols();
    Eigen::VectorXd resid = precision_w_.cwiseProduct(in_.z - s.xi);
    GaussianConditional c;
    c.precision.resize(nb + k, nb + k);
    c.precision.topLeftCorner(nb, nb) = mu_gram_;
    c.precision.topRightCorner(nb, k) = cross_gram_;
    c.precision.bottomLeftCorner(k, nb) = cross_gram_.transpose();
    c.precision.bottomRightCorner(k, k) = eta_gram_;
    c.precision.diagonal().head(nb).array() += 1.0 / s.sigma2_mu;
    c.precision.diagonal().tail(k).array() += 1.0 / s.sigma2_k;
    Eigen::VectorXd rhs(nb + k);
    rhs.head(nb) = in_.overlap.transpose() * resid;
    rhs.tail(k) = psi_factor_.transpose() * resid;
    c.mean = solve(c.precision, rhs, "(mu_B, eta)", s);
    return c;
  }

  /// One sweep: (mu_B, eta) jointly, then xi, then the three variances.
  ProcessParams step(const ProcessParams& state, Rng& rng) const {
    ProcessParams s = state;
    const Eigen::Index nb = in_.fine_units();

    auto joint = joint_conditional(s);
    Eigen::VectorXd x = draw_gaussian(joint, rng, "(mu_B, eta)", s);
    s.mu = x.head(nb);
    Eigen::VectorXd alpha = x.tail(factor_.cols());
    s.eta = factor_ * alpha;

    Eigen::VectorXd resid = in_.z - in_.overlap * s.mu - in_.psi * s.eta;
    for (Eigen::Index i = 0; i < in_.observations(); ++i) {
      double prec = precision_w_[i] + 1.0 / s.sigma2_xi;
      double mean = resid[i] * precision_w_[i] / prec;
      s.xi[i] = mean + draw_normal(rng) / std::sqrt(prec);
    }

    const double n = static_cast<double>(in_.observations());
    const double rank = static_cast<double>(factor_.cols());
    s.sigma2_xi = draw_inverse_gamma(rng, priors_.sigma2_xi.shape + 0.5 * n,
                                     priors_.sigma2_xi.scale + 0.5 * s.xi.squaredNorm());
    s.sigma2_k = draw_inverse_gamma(rng, priors_.sigma2_k.shape + 0.5 * rank,
                                    priors_.sigma2_k.scale + 0.5 * alpha.squaredNorm());
    s.sigma2_mu = draw_inverse_gamma(rng, priors_.sigma2_mu.shape + 0.5 * static_cast<double>(nb),
                                     priors_.sigma2_mu.scale + 0.5 * s.mu.squaredNorm());
    return s;
  }

private:
  std::string dump(const char* block, const ProcessParams& s) const {
    std::ostringstream os;
    os << "conditional precision for " << block << " is not positive definite"
       << " [N=" << in_.observations() << ", n_B=" << in_.fine_units() << ", r=" << in_.basis_size()
       << ", rank(K_0)=" << factor_.cols() << ", sigma2_xi=" << s.sigma2_xi << ", sigma2_K=" << s.sigma2_k
       << ", sigma2_mu=" << s.sigma2_mu << ", min V=" << (in_.variance.size() ? in_.variance.minCoeff() : 0.0) << "]";
    return os.str();
  }

  Eigen::VectorXd solve(const Eigen::MatrixXd& precision, const Eigen::VectorXd& rhs, const char* block,
                        const ProcessParams& s) const {
    Eigen::LLT<Eigen::MatrixXd> llt(precision);
    if (llt.info() != Eigen::Success) throw LinearAlgebraError(dump(block, s));
    return llt.solve(rhs);
  }

  Eigen::VectorXd draw_gaussian(const GaussianConditional& c, Rng& rng, const char* block,
                                const ProcessParams& s) const {
    Eigen::LLT<Eigen::MatrixXd> llt(c.precision);
    if (llt.info() != Eigen::Success) throw LinearAlgebraError(dump(block, s));
    Eigen::VectorXd z(c.mean.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = draw_normal(rng);
    // Precision = R'R with R = L'; x = mean + R^{-1} z has covariance precision^{-1}.
    return c.mean + llt.matrixU().solve(z);
  }

  const FittedModelInputs& in_;
  Priors priors_;
  Eigen::MatrixXd factor_;
  Eigen::VectorXd precision_w_;
  Eigen::MatrixXd psi_factor_;
  Eigen::MatrixXd eta_gram_;
  Eigen::MatrixXd mu_gram_;
  Eigen::MatrixXd cross_gram_;
};

inline ProcessParams gibbs_step(const ProcessParams& state, const FittedModelInputs& inputs, const Priors& priors,
                                Rng& rng) {
  return GibbsSampler(inputs, priors).step(state, rng);
}

/// Effective sample size with Geyer's initial monotone positive-sequence truncation.
inline double effective_sample_size(const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n < 4) return static_cast<double>(n);
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  auto autocov = [&](std::size_t lag) {
    double s = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) s += (x[i] - mean) * (x[i + lag] - mean);
    return s / static_cast<double>(n);
  };
  double c0 = autocov(0);
  if (!(c0 > 0.0)) return static_cast<double>(n);
  double sum = 0.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (std::size_t lag = 0; lag + 1 < n; lag += 2) {
    double pair = (autocov(lag) + autocov(lag + 1)) / c0;
    if (pair <= 0.0) break;
    pair = std::min(pair, prev_pair);
    sum += pair;
    prev_pair = pair;
  }
  double tau = -1.0 + 2.0 * sum;
  return static_cast<double>(n) / std::max(tau, 1e-12);
}

/// Split-chain potential scale reduction for a single chain.
inline double split_rhat(const std::vector<double>& x) {
  const std::size_t half = x.size() / 2;
  if (half < 2) return std::numeric_limits<double>::quiet_NaN();
  auto stats = [&](std::size_t from) {
    double m = 0.0;
    for (std::size_t i = from; i < from + half; ++i) m += x[i];
    m /= static_cast<double>(half);
    double v = 0.0;
    for (std::size_t i = from; i < from + half; ++i) v += (x[i] - m) * (x[i] - m);
    return std::pair{m, v / static_cast<double>(half - 1)};
  };
  auto [m1, v1] = stats(x.size() - 2 * half);
  auto [m2, v2] = stats(x.size() - half);
  double w = 0.5 * (v1 + v2);
  if (!(w > 0.0)) return 1.0;
  double grand = 0.5 * (m1 + m2);
  double b = static_cast<double>(half) * ((m1 - grand) * (m1 - grand) + (m2 - grand) * (m2 - grand));
  double var_plus = (static_cast<double>(half) - 1.0) / static_cast<double>(half) * w + b / static_cast<double>(half);
  return std::sqrt(var_plus / w);
}

inline ParameterSummary summarize_trace(std::string name, const std::vector<double>& trace) {
  ParameterSummary s;
  s.name = std::move(name);
  if (trace.empty()) return s;
  double m = 0.0;
  for (double v : trace) m += v;
  m /= static_cast<double>(trace.size());
  double var = 0.0;
  for (double v : trace) var += (v - m) * (v - m);
  s.mean = m;
  s.sd = trace.size() > 1 ? std::sqrt(var / static_cast<double>(trace.size() - 1)) : 0.0;
  s.ess = effective_sample_size(trace);
  s.split_rhat = split_rhat(trace);
  return s;
}

/// Scalar traces named sigma2_xi, sigma2_K, sigma2_mu, mu[i], eta[j].
inline std::vector<ParameterSummary> chain_diagnostics(const std::vector<ProcessParams>& records) {
  std::vector<ParameterSummary> out;
  if (records.empty()) return out;
  auto trace_of = [&](auto&& get) {
    std::vector<double> t;
    t.reserve(records.size());
    for (const auto& r : records) t.push_back(get(r));
    return t;
  };
  out.push_back(summarize_trace("sigma2_xi", trace_of([](const ProcessParams& p) { return p.sigma2_xi; })));
  out.push_back(summarize_trace("sigma2_K", trace_of([](const ProcessParams& p) { return p.sigma2_k; })));
  out.push_back(summarize_trace("sigma2_mu", trace_of([](const ProcessParams& p) { return p.sigma2_mu; })));
  for (Eigen::Index i = 0; i < records.front().mu.size(); ++i)
    out.push_back(summarize_trace("mu[" + std::to_string(i) + "]", trace_of([i](const ProcessParams& p) { return p.mu[i]; })));
  for (Eigen::Index j = 0; j < records.front().eta.size(); ++j)
    out.push_back(summarize_trace("eta[" + std::to_string(j) + "]", trace_of([j](const ProcessParams& p) { return p.eta[j]; })));
  return out;
}

/// Runs the chain from `initial` (or the sampler's default start), keeping every
/// `thin`-th iteration after burn-in.
inline PosteriorDraws run_chain(const FittedModelInputs& inputs, const Priors& priors, const ChainSettings& chain,
                                const std::optional<ProcessParams>& initial = std::nullopt) {
  chain.validate();
  GibbsSampler sampler(inputs, priors);
  PosteriorDraws draws;
  draws.seed = chain.seed;
  draws.iterations = chain.iterations;
  draws.burn_in = chain.burn_in;
  draws.thin = chain.thin;
  if (chain.iterations == chain.burn_in) {
    draws.warnings.push_back("iterations equal burn-in: no draws stored");
    return draws;
  }
  draws.records.reserve(static_cast<std::size_t>((chain.iterations - chain.burn_in) / chain.thin));

  Rng rng(derive_seed(chain.seed, 0xc4a1));
  ProcessParams state = initial.value_or(sampler.initial_state());
  for (long it = 1; it <= chain.iterations; ++it) {
    state = sampler.step(state, rng);
    if (!state.finite()) throw NumericalFailure("non-finite sampler state", it);
    if (it > chain.burn_in && (it - chain.burn_in) % chain.thin == 0) draws.records.push_back(state);
  }
  draws.diagnostics = chain_diagnostics(draws.records);
  return draws;
}

}  // namespace stcos
