#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "stcos/basis.hpp"
#include "stcos/error.hpp"
#include "stcos/geometry.hpp"
#include "stcos/model.hpp"
#include "stcos/pipeline.hpp"
#include "stcos/rng.hpp"
#include "stcos/sampler.hpp"

namespace stcos {

/// Which (year, period) groups a synthetic dataset carries.
enum class PeriodLayout {
  /// 1-year every year, 3-year from the third year, 5-year on a coarse misaligned
  /// partition from the fifth year.
  recovery,
  /// 1-year 2006-2013, 3-year 2007-2012, 5-year 2009-2013 on the fine units (19 groups).
  acs,
};

struct SimulationSettings {
  std::size_t grid_side = 5;  // fine set is grid_side x grid_side square cells
  double cell_size = 1.0;
  std::size_t coarse_side = 4;  // coarse partition for the recovery layout's 5-year data
  PeriodLayout layout = PeriodLayout::recovery;
  int first_year = 2010;
  int years = 6;  // recovery layout only
  double sigma2_xi = 0.5;
  double sigma2_k = 2.0;
  double sigma2_mu = 4.0;
  double trend_mean = 0.0;
  std::map<int, double> survey_sd{{1, 1.0}, {3, 0.7}, {5, 0.5}};
  double sd_jitter = 0.25;  // sds are scaled by a uniform factor in [1 - j, 1 + j]
  std::uint64_t seed = 1;
  ModelConfig model;  // basis and covariance settings used to generate the truth
};

struct SimulatedDataset {
  SupportSet fine;
  SupportSet sources;
  std::vector<SurveyDatum> data;
  std::vector<double> truth;  // latent Y per datum
  ProcessParams params;       // mu, eta, xi (per datum) and the variances
  ModelStructure structure;
};

inline SupportSet grid_support(std::size_t side, double cell, const std::string& prefix) {
  std::vector<ArealUnit> units;
  for (std::size_t row = 0; row < side; ++row)
    for (std::size_t col = 0; col < side; ++col) {
      std::string id = prefix + std::to_string(row) + "_" + std::to_string(col);
      units.push_back(make_rectangle(id, col * cell, row * cell, (col + 1) * cell, (row + 1) * cell));
    }
  return SupportSet(std::move(units), true);
}

inline std::vector<std::pair<int, int>> layout_periods(const SimulationSettings& s) {
  std::vector<std::pair<int, int>> out;
  if (s.layout == PeriodLayout::acs) {
    for (int t = 2006; t <= 2013; ++t) out.emplace_back(t, 1);
    for (int t = 2007; t <= 2012; ++t) out.emplace_back(t, 3);
    for (int t = 2009; t <= 2013; ++t) out.emplace_back(t, 5);
  } else {
    const int last = s.first_year + s.years - 1;
    for (int t = s.first_year; t <= last; ++t) out.emplace_back(t, 1);
    for (int t = s.first_year + 2; t <= last; ++t) out.emplace_back(t, 3);
    for (int t = s.first_year + 4; t <= last; ++t) out.emplace_back(t, 5);
  }
  return out;
}

/// Draws a dataset from the data and process models with known parameters.
inline SimulatedDataset simulate(const SimulationSettings& s) {
  if (s.grid_side == 0 || !(s.cell_size > 0.0)) throw ConfigurationError("simulation grid must be nonempty");
  if (!(s.sigma2_xi > 0.0) || !(s.sigma2_k > 0.0) || !(s.sigma2_mu > 0.0))
    throw DomainError("simulation variances must be positive");
  for (auto [period, sd] : s.survey_sd)
    if (!(sd > 0.0)) throw DomainError("sampling sd for period " + std::to_string(period) + " must be positive");
  if (!(s.sd_jitter >= 0.0 && s.sd_jitter < 1.0)) throw ConfigurationError("sd_jitter must lie in [0, 1)");

  SimulatedDataset out;
  out.fine = grid_support(s.grid_side, s.cell_size, "B");
  const bool coarse = s.layout == PeriodLayout::recovery && s.coarse_side > 0;
  std::vector<ArealUnit> source_units(out.fine.units());
  SupportSet coarse_set;
  if (coarse) {
    coarse_set = grid_support(s.coarse_side, s.cell_size * s.grid_side / s.coarse_side, "C");
    for (const auto& u : coarse_set) source_units.push_back(u);
  }
  out.sources = SupportSet(std::move(source_units), false);

  auto periods = layout_periods(s);
  auto adjacency = build_adjacency(out.fine);
  out.structure = build_structure(out.fine, adjacency, periods, s.model, s.seed);

  std::vector<PeriodSupport> supports;
  for (auto [year, period] : periods) {
    const SupportSet& units = (period == 5 && coarse) ? coarse_set : out.fine;
    for (const auto& u : units) {
      auto it = s.survey_sd.find(period);
      if (it == s.survey_sd.end()) throw ConfigurationError("no sampling sd for period " + std::to_string(period));
      supports.push_back({u, year, period});
      out.data.push_back({u.id(), year, period, 0.0, it->second});
    }
  }
  DesignOptions opt{s.model.basis.mc_points, derive_seed(s.seed, 0x517), s.model.threads};
  auto rows = build_design(out.structure.basis, supports, out.fine, opt);

  Rng rng(derive_seed(s.seed, 0x7a7));
  const auto nb = static_cast<Eigen::Index>(out.fine.size());
  ProcessParams& p = out.params;
  p.sigma2_xi = s.sigma2_xi;
  p.sigma2_k = s.sigma2_k;
  p.sigma2_mu = s.sigma2_mu;
  p.mu.resize(nb);
  for (Eigen::Index i = 0; i < nb; ++i) p.mu[i] = s.trend_mean + std::sqrt(s.sigma2_mu) * draw_normal(rng);
  Eigen::MatrixXd factor = out.structure.k0.factor();
  Eigen::VectorXd alpha(factor.cols());
  for (Eigen::Index j = 0; j < alpha.size(); ++j) alpha[j] = std::sqrt(s.sigma2_k) * draw_normal(rng);
  p.eta = factor * alpha;
  p.xi.resize(static_cast<Eigen::Index>(out.data.size()));

  for (std::size_t i = 0; i < out.data.size(); ++i) {
    auto& d = out.data[i];
    double xi = std::sqrt(s.sigma2_xi) * draw_normal(rng);
    p.xi[static_cast<Eigen::Index>(i)] = xi;
    double y = rows[i].overlap.dot(p.mu) + rows[i].psi.dot(p.eta) + xi;
    d.sd *= 1.0 + s.sd_jitter * (2.0 * uniform01(rng) - 1.0);
    d.estimate = y + d.sd * draw_normal(rng);
    out.truth.push_back(y);
  }
  return out;
}

}  // namespace stcos
