#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "stcos/error.hpp"
#include "stcos/geometry.hpp"
#include "stcos/parallel.hpp"
#include "stcos/rng.hpp"

namespace stcos {

/// Space-time bisquare basis. Index j enumerates (spatial knot, temporal knot) pairs
/// spatial-major: j = spatial_index * m_t + temporal_index.
class BasisSystem {
public:
  BasisSystem() = default;
  BasisSystem(KnotSet knots, double spatial_radius, double temporal_radius)
      : knots_(std::move(knots)), ws_(spatial_radius), wt_(temporal_radius) {
    knots_.validate();
    if (!(ws_ > 0.0) || !(wt_ > 0.0)) throw ConfigurationError("basis radii must be positive");
  }

  const KnotSet& knots() const { return knots_; }
  double spatial_radius() const { return ws_; }
  double temporal_radius() const { return wt_; }
  std::size_t spatial_count() const { return knots_.spatial_count(); }
  std::size_t temporal_count() const { return knots_.temporal_count(); }
  std::size_t size() const { return spatial_count() * temporal_count(); }

  std::size_t spatial_index(std::size_t j) const { return j / temporal_count(); }
  std::size_t temporal_index(std::size_t j) const { return j % temporal_count(); }

private:
  KnotSet knots_;
  double ws_ = 1.0;
  double wt_ = 1.0;
};

namespace detail {

// The bracket is clamped at zero: near the corners of the rectangular support window it
// would otherwise go negative and squaring would produce a spurious positive lobe.
inline double bisquare(double ds, double ws, double dt, double wt) {
  if (ds > ws || dt > wt) return 0.0;
  double bracket = 1.0 - (ds / ws) * (ds / ws) - (dt / wt) * (dt / wt);
  return bracket > 0.0 ? bracket * bracket : 0.0;
}

}  // namespace detail

inline double eval_point(const BasisSystem& sys, std::size_t j, const Point& u, double t) {
  if (j >= sys.size()) throw ConfigurationError("basis index out of range");
  const Point& c = sys.knots().spatial[sys.spatial_index(j)];
  double g = sys.knots().temporal[sys.temporal_index(j)];
  return detail::bisquare(distance(u, c), sys.spatial_radius(), std::abs(t - g), sys.temporal_radius());
}

/// Monte Carlo points for a unit. The stream is keyed by the unit's geometry, so every
/// design row built on the same support sees the same points.
inline std::vector<Point> unit_sample(const ArealUnit& unit, std::size_t h, std::uint64_t seed) {
  return uniform_sample(unit, h, derive_seed(seed, unit.geometry_digest()));
}

/// All r basis functions averaged over a point set at year k.
inline Eigen::VectorXd basis_average(const BasisSystem& sys, std::span<const Point> points, double k) {
  const std::size_t rs = sys.spatial_count();
  const std::size_t mt = sys.temporal_count();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sys.size()));
  if (points.empty()) return out;
  std::vector<double> time_dev(mt);
  for (std::size_t b = 0; b < mt; ++b) time_dev[b] = std::abs(k - sys.knots().temporal[b]);
  for (const auto& p : points) {
    for (std::size_t a = 0; a < rs; ++a) {
      double ds = distance(p, sys.knots().spatial[a]);
      if (ds > sys.spatial_radius()) continue;
      for (std::size_t b = 0; b < mt; ++b) {
        out[static_cast<Eigen::Index>(a * mt + b)] +=
            detail::bisquare(ds, sys.spatial_radius(), time_dev[b], sys.temporal_radius());
      }
    }
  }
  return out / static_cast<double>(points.size());
}

struct MonteCarloEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Normalized areal average (1/|A|) * integral of psi_j(u; k) over A, by direct Monte Carlo.
inline MonteCarloEstimate integrate_area_estimate(const BasisSystem& sys, std::size_t j, const ArealUnit& unit,
                                                  double k, std::size_t h, std::uint64_t seed) {
  auto points = unit_sample(unit, h, seed);
  double sum = 0.0;
  double sum_sq = 0.0;
  for (const auto& p : points) {
    double v = eval_point(sys, j, p, k);
    sum += v;
    sum_sq += v * v;
  }
  const double n = static_cast<double>(points.size());
  double mean = sum / n;
  double var = n > 1 ? std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0)) : 0.0;
  return {mean, std::sqrt(var / n)};
}

inline double integrate_area(const BasisSystem& sys, std::size_t j, const ArealUnit& unit, double k, std::size_t h,
                             std::uint64_t seed) {
  return integrate_area_estimate(sys, j, unit, k, h, seed).value;
}

/// psi_t^(l)(A): the equally weighted mean over years t-l+1..t of the areal averages,
/// all computed on one shared point set.
inline Eigen::VectorXd aggregate_period(const BasisSystem& sys, std::span<const Point> points, int year, int period) {
  if (period < 1) throw ConfigurationError("period must be at least 1");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sys.size()));
  for (int k = year - period + 1; k <= year; ++k) acc += basis_average(sys, points, static_cast<double>(k));
  return acc / static_cast<double>(period);
}

inline Eigen::VectorXd aggregate_period(const BasisSystem& sys, const ArealUnit& unit, int year, int period,
                                        std::size_t h, std::uint64_t seed) {
  auto points = unit_sample(unit, h, seed);
  return aggregate_period(sys, points, year, period);
}

/// A support (areal unit plus period) on which a design row is needed.
struct PeriodSupport {
  std::reference_wrapper<const ArealUnit> unit;
  int year;
  int period;
};

struct DesignRow {
  std::string unit_id;
  int year = 0;
  int period = 1;
  Eigen::VectorXd psi;      // r aggregated basis values
  Eigen::VectorXd overlap;  // n_B fractions h(A)
};

struct DesignOptions {
  std::size_t mc_points = 1000;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

/// One design row per support. Overlaps and sample points are computed once per distinct
/// unit geometry.
inline std::vector<DesignRow> build_design(const BasisSystem& sys, std::span<const PeriodSupport> supports,
                                           const SupportSet& fine, const DesignOptions& opt) {
  if (fine.empty()) throw ConfigurationError("empty fine support set");
  if (supports.empty()) throw ConfigurationError("no supports to build a design for");

  std::map<std::uint64_t, std::size_t> slot_of;
  std::vector<const ArealUnit*> distinct;
  std::vector<std::size_t> slot(supports.size());
  for (std::size_t i = 0; i < supports.size(); ++i) {
    const ArealUnit& u = supports[i].unit.get();
    auto [it, inserted] = slot_of.emplace(u.geometry_digest(), distinct.size());
    if (inserted) distinct.push_back(&u);
    slot[i] = it->second;
  }

  std::vector<Eigen::VectorXd> overlaps(distinct.size());
  std::vector<std::vector<Point>> samples(distinct.size());
  parallel_for(distinct.size(), opt.threads, [&](std::size_t s) {
    overlaps[s] = overlap_fractions(*distinct[s], fine);
    samples[s] = unit_sample(*distinct[s], opt.mc_points, opt.seed);
  });

  std::vector<DesignRow> rows(supports.size());
  parallel_for(supports.size(), opt.threads, [&](std::size_t i) {
    const auto& sup = supports[i];
    DesignRow& row = rows[i];
    row.unit_id = sup.unit.get().id();
    row.year = sup.year;
    row.period = sup.period;
    row.psi = aggregate_period(sys, samples[slot[i]], sup.year, sup.period);
    row.overlap = overlaps[slot[i]];
  });
  return rows;
}

/// Target design Psi: l = 1 rows for every (year, fine unit), row index (t - first_year) * n_B + i.
inline Eigen::MatrixXd build_target_psi(const BasisSystem& sys, const SupportSet& fine, int first_year,
                                        int last_year, const DesignOptions& opt) {
  if (fine.empty()) throw ConfigurationError("empty fine support set");
  if (last_year < first_year) throw ConfigurationError("empty year range");
  const auto nb = static_cast<Eigen::Index>(fine.size());
  const int years = last_year - first_year + 1;
  Eigen::MatrixXd psi(nb * years, static_cast<Eigen::Index>(sys.size()));
  std::vector<std::vector<Point>> samples(fine.size());
  parallel_for(fine.size(), opt.threads,
               [&](std::size_t i) { samples[i] = unit_sample(fine[i], opt.mc_points, opt.seed); });
  for (int t = 0; t < years; ++t) {
    for (Eigen::Index i = 0; i < nb; ++i) {
      psi.row(t * nb + i) = basis_average(sys, samples[static_cast<std::size_t>(i)], first_year + t).transpose();
    }
  }
  return psi;
}

/// Temporal knots at the midpoints t - (l - 1)/2 of the distinct periods.
inline std::vector<double> period_midpoints(std::span<const std::pair<int, int>> periods) {
  std::set<double> mids;
  for (auto [year, period] : periods) mids.insert(year - 0.5 * (period - 1));
  return {mids.begin(), mids.end()};
}

/// Evenly spaced temporal knots spanning [first, last].
inline std::vector<double> even_temporal_knots(double first, double last, std::size_t count) {
  if (count == 0) throw ConfigurationError("need at least one temporal knot");
  if (count == 1) return {0.5 * (first + last)};
  std::vector<double> knots(count);
  for (std::size_t k = 0; k < count; ++k) knots[k] = first + (last - first) * k / static_cast<double>(count - 1);
  return knots;
}

/// Spatial radius as a multiple of the smallest inter-knot distance. A single knot uses the
/// domain diagonal instead.
inline double default_spatial_radius(const std::vector<Point>& knots, const SupportSet& domain,
                                     double multiplier = 1.1) {
  if (knots.size() < 2) return multiplier * domain.bounds().diagonal();
  return multiplier * min_pairwise_distance(knots);
}

}  // namespace stcos
