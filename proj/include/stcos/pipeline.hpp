#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "stcos/basis.hpp"
#include "stcos/covariance.hpp"
#include "stcos/geometry.hpp"
#include "stcos/model.hpp"
#include "stcos/rng.hpp"
#include "stcos/sampler.hpp"

namespace stcos {

/// Everything derived from supports and periods before any estimate is looked at:
/// basis, target-process covariance and the base random-effects covariance K_0.
struct ModelStructure {
  BasisSystem basis;
  int first_year = 0;
  int last_year = 0;
  AdjacencyMatrix adjacency;
  Eigen::MatrixXd propagator;  // n_B x n_B VAR(1) matrix
  Eigen::MatrixXd sigma0;      // stationary covariance at unit sigma_K^2
  Eigen::MatrixXd joint;       // (n_B T) x (n_B T)
  Eigen::MatrixXd target_psi;  // (n_B T) x r
  RandomEffectsCov k0;

  int years() const { return last_year - first_year + 1; }
};

inline std::pair<int, int> year_range(std::span<const std::pair<int, int>> periods) {
  if (periods.empty()) throw ConfigurationError("no periods");
  int lo = std::numeric_limits<int>::max();
  int hi = std::numeric_limits<int>::min();
  for (auto [year, period] : periods) {
    lo = std::min(lo, year - period + 1);
    hi = std::max(hi, year);
  }
  return {lo, hi};
}

/// Seed of the Monte Carlo design points used at fit time.
inline std::uint64_t design_seed(std::uint64_t seed) { return derive_seed(seed, 0xde51); }

inline BasisSystem make_basis(const SupportSet& fine, std::span<const std::pair<int, int>> periods, int first_year,
                              int last_year, const BasisSettings& settings) {
  KnotSet knots;
  knots.spatial = space_filling_knots(fine, settings.spatial_knots, settings.knot_candidates, settings.knot_seed);
  if (!settings.temporal_knots.empty()) {
    knots.temporal = settings.temporal_knots;
  } else if (settings.temporal_knot_count > 0) {
    knots.temporal = even_temporal_knots(first_year, last_year, settings.temporal_knot_count);
  } else {
    knots.temporal = period_midpoints(periods);
  }
  double ws = settings.spatial_radius.value_or(
      default_spatial_radius(knots.spatial, fine, settings.spatial_radius_multiplier));
  return BasisSystem(std::move(knots), ws, settings.temporal_radius);
}

/// Builds the basis and K_0 for a fine set and the (year, period) pairs the data live on.
/// `years` overrides the range implied by the periods.
inline ModelStructure build_structure(const SupportSet& fine, const AdjacencyMatrix& adjacency,
                                      std::span<const std::pair<int, int>> periods, const ModelConfig& config,
                                      std::uint64_t seed, std::optional<std::pair<int, int>> years = std::nullopt) {
  config.validate();
  if (fine.empty()) throw ConfigurationError("empty fine support set");
  if (adjacency.size() != fine.size()) throw ConfigurationError("adjacency size does not match the fine set");

  ModelStructure s;
  std::tie(s.first_year, s.last_year) = years.value_or(year_range(periods));
  if (s.last_year < s.first_year) throw ConfigurationError("empty year range");
  s.basis = make_basis(fine, periods, s.first_year, s.last_year, config.basis);
  s.adjacency = adjacency;

  const auto nb = static_cast<Eigen::Index>(fine.size());
  Eigen::MatrixXd intercept = Eigen::MatrixXd::Ones(nb, 1);
  std::size_t rank = config.covariance.propagator_rank ? config.covariance.propagator_rank
                                                        : static_cast<std::size_t>(nb - 1);
  if (nb > 1) {
    auto mi = mi_propagator(intercept, Eigen::MatrixXd::Identity(nb, nb), rank);
    s.propagator = var_propagator(mi, config.covariance.propagator_scale);
  } else {
    s.propagator = Eigen::MatrixXd::Zero(1, 1);
  }
  auto innovation = innovation_cov(adjacency, config.covariance.rho);
  s.sigma0 = stationary_cov(s.propagator, innovation.covariance);
  s.joint = assemble_joint(s.propagator, s.sigma0, s.years());

  DesignOptions opt{config.basis.mc_points, design_seed(seed), config.threads};
  s.target_psi = build_target_psi(s.basis, fine, s.first_year, s.last_year, opt);
  s.k0 = solve_k0(s.joint, s.target_psi);
  return s;
}

/// Hex fingerprint of the basis, the fine set and the year range. Prediction refuses draws
/// whose fingerprint differs.
inline std::string model_fingerprint(const BasisSystem& basis, const SupportSet& fine, int first_year, int last_year) {
  std::uint64_t h = mix64(0x57c05);
  auto feed_bits = [&h](double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h = mix64(h ^ bits);
  };
  for (const auto& k : basis.knots().spatial) {
    feed_bits(k.x);
    feed_bits(k.y);
  }
  for (double g : basis.knots().temporal) feed_bits(g);
  feed_bits(basis.spatial_radius());
  feed_bits(basis.temporal_radius());
  for (const auto& u : fine) {
    h = mix64(h ^ fnv1a(u.id()));
    h = mix64(h ^ u.geometry_digest());
  }
  h = mix64(h ^ static_cast<std::uint64_t>(first_year + (1 << 20)));
  h = mix64(h ^ static_cast<std::uint64_t>(last_year + (1 << 20)));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// A datum's support together with the datum's position in the fitted data.
struct ObservedSupport {
  ArealUnit unit;
  int year = 0;
  int period = 1;
  std::size_t datum = 0;
};

/// What prediction needs from a fit besides the draws.
struct FittedModel {
  BasisSystem basis;
  SupportSet fine;
  int first_year = 0;
  int last_year = 0;
  std::vector<ObservedSupport> observed;

  std::string fingerprint() const { return model_fingerprint(basis, fine, first_year, last_year); }
};

struct FitProblem {
  SupportSet fine;
  SupportSet sources;  // units the estimates refer to (fine units may be referenced directly)
  std::optional<AdjacencyMatrix> adjacency;
  std::vector<SurveyDatum> data;
  std::optional<std::pair<int, int>> years;
};

struct FitResult {
  ModelStructure structure;
  FittedModelInputs inputs;
  PosteriorDraws draws;
  FittedModel model;
};

inline const ArealUnit& resolve_unit(const FitProblem& problem, const std::string& id) {
  if (auto i = problem.sources.find(id)) return problem.sources[*i];
  if (auto i = problem.fine.find(id)) return problem.fine[*i];
  throw ConfigurationError("estimate refers to unknown unit '" + id + "'");
}

inline std::vector<std::pair<int, int>> distinct_periods(std::span<const SurveyDatum> data) {
  std::vector<std::pair<int, int>> out;
  for (const auto& d : data) out.emplace_back(d.year, d.period);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Geometry -> basis -> covariance -> assembly -> Gibbs chain.
inline FitResult fit_model(const FitProblem& problem, const ModelConfig& config) {
  config.validate();
  validate_data(problem.data);
  if (problem.data.empty()) throw ConfigurationError("no estimates to fit");

  AdjacencyMatrix adjacency = problem.adjacency ? *problem.adjacency : build_adjacency(problem.fine);
  auto periods = distinct_periods(problem.data);

  FitResult out;
  const std::uint64_t seed = config.chain.seed;
  out.structure = build_structure(problem.fine, adjacency, periods, config, seed, problem.years);

  std::vector<PeriodSupport> supports;
  supports.reserve(problem.data.size());
  for (const auto& d : problem.data) {
    const ArealUnit& unit = resolve_unit(problem, d.unit_id);
    if (d.year - d.period + 1 < out.structure.first_year || d.year > out.structure.last_year)
      throw ConfigurationError("datum (" + d.unit_id + ", " + std::to_string(d.year) + ", " +
                               std::to_string(d.period) + ") falls outside the modelled years");
    supports.push_back({unit, d.year, d.period});
  }
  DesignOptions opt{config.basis.mc_points, design_seed(seed), config.threads};
  auto rows = build_design(out.structure.basis, supports, problem.fine, opt);
  out.inputs = assemble(problem.data, rows, out.structure.k0, static_cast<Eigen::Index>(problem.fine.size()));

  out.model.basis = out.structure.basis;
  out.model.fine = problem.fine;
  out.model.first_year = out.structure.first_year;
  out.model.last_year = out.structure.last_year;
  for (std::size_t i = 0; i < problem.data.size(); ++i)
    out.model.observed.push_back({supports[i].unit.get(), problem.data[i].year, problem.data[i].period, i});

  out.draws = run_chain(out.inputs, config.priors, config.chain);
  out.draws.config_hash = out.model.fingerprint();
  return out;
}

}  // namespace stcos
