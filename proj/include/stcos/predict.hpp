#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "stcos/basis.hpp"
#include "stcos/error.hpp"
#include "stcos/geometry.hpp"
#include "stcos/model.hpp"
#include "stcos/parallel.hpp"
#include "stcos/pipeline.hpp"
#include "stcos/rng.hpp"
#include "stcos/sampler.hpp"

namespace stcos {

/// How the fine-scale error enters a prediction on a support without a fitted xi.
enum class FineScaleNoise {
  fresh,   // independent draw per (draw, target, year, period)
  shared,  // one draw per posterior draw, common to every record
  none,    // omitted (the latent mean h'mu + psi'eta)
};

struct TargetQuery {
  SupportSet targets;
  std::vector<std::pair<int, int>> periods;  // (year, period)
  std::size_t mc_points = 1000;
  std::uint64_t seed = 0;
  FineScaleNoise noise = FineScaleNoise::fresh;
  bool reuse_observed_noise = true;
  unsigned threads = 1;
};

struct PredictionRecord {
  std::string target_id;
  int year = 0;
  int period = 1;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double sd = std::numeric_limits<double>::quiet_NaN();
  double lo95 = std::numeric_limits<double>::quiet_NaN();
  double hi95 = std::numeric_limits<double>::quiet_NaN();
  std::string error;

  bool ok() const { return error.empty(); }
};

/// Linear-interpolation empirical quantile of sorted values.
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  double pos = q * static_cast<double>(sorted.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(pos));
  auto hi = std::min(lo + 1, sorted.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

/// Posterior predictive samples: one row per (target, period) record, one column per draw.
struct PredictiveSamples {
  std::vector<PredictionRecord> records;  // summaries filled in by summarize()
  Eigen::MatrixXd values;                 // records x draws (NaN rows for failed records)
};

inline void summarize(PredictiveSamples& s) {
  for (Eigen::Index k = 0; k < s.values.rows(); ++k) {
    auto& rec = s.records[static_cast<std::size_t>(k)];
    if (!rec.ok()) continue;
    std::vector<double> v(s.values.cols());
    for (Eigen::Index d = 0; d < s.values.cols(); ++d) v[static_cast<std::size_t>(d)] = s.values(k, d);
    double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    rec.mean = mean;
    rec.sd = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    std::sort(v.begin(), v.end());
    rec.lo95 = std::min(sorted_quantile(v, 0.025), mean);
    rec.hi95 = std::max(sorted_quantile(v, 0.975), mean);
  }
}

inline PredictiveSamples predictive_samples(const PosteriorDraws& draws, const TargetQuery& query,
                                            const FittedModel& model) {
  if (draws.empty()) throw ConfigurationError("no posterior draws to predict from");
  if (draws.config_hash != model.fingerprint())
    throw ArtifactMismatch("draws were fitted with a different basis or fine set (fingerprint " + draws.config_hash +
                           " vs " + model.fingerprint() + ")");

  const std::size_t np = query.periods.size();
  const std::size_t total = query.targets.size() * np;
  const auto ndraws = static_cast<Eigen::Index>(draws.size());
  PredictiveSamples out;
  out.records.resize(total);
  out.values = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(total), ndraws,
                                         std::numeric_limits<double>::quiet_NaN());

  std::vector<double> shared_noise;
  if (query.noise == FineScaleNoise::shared) {
    Rng rng(derive_seed(query.seed, 0x5a4ed));
    for (const auto& rec : draws.records) shared_noise.push_back(std::sqrt(rec.sigma2_xi) * draw_normal(rng));
  }

  parallel_for(query.targets.size(), query.threads, [&](std::size_t a) {
    const ArealUnit& target = query.targets[a];
    Eigen::VectorXd overlap = overlap_fractions(target, model.fine);
    auto points = unit_sample(target, query.mc_points, query.seed);
    for (std::size_t p = 0; p < np; ++p) {
      const std::size_t k = a * np + p;
      auto [year, period] = query.periods[p];
      PredictionRecord& rec = out.records[k];
      rec.target_id = target.id();
      rec.year = year;
      rec.period = period;
      if (period < 1) {
        rec.error = "period must be at least 1";
        continue;
      }
      if (year - period + 1 < model.first_year || year > model.last_year) {
        rec.error = "years " + std::to_string(year - period + 1) + ".." + std::to_string(year) +
                    " outside fitted range " + std::to_string(model.first_year) + ".." +
                    std::to_string(model.last_year);
        continue;
      }
      Eigen::VectorXd psi = aggregate_period(model.basis, points, year, period);

      std::optional<std::size_t> observed;
      if (query.reuse_observed_noise) {
        for (const auto& o : model.observed) {
          if (o.year == year && o.period == period && o.unit.same_geometry(target)) {
            observed = o.datum;
            break;
          }
        }
      }

      Rng rng(derive_seed(query.seed, 0xf4e5, k));
      for (Eigen::Index d = 0; d < ndraws; ++d) {
        const auto& draw = draws.records[static_cast<std::size_t>(d)];
        double y = overlap.dot(draw.mu) + psi.dot(draw.eta);
        if (observed) {
          y += draw.xi[static_cast<Eigen::Index>(*observed)];
        } else if (query.noise == FineScaleNoise::fresh) {
          y += std::sqrt(draw.sigma2_xi) * draw_normal(rng);
        } else if (query.noise == FineScaleNoise::shared) {
          y += shared_noise[static_cast<std::size_t>(d)];
        }
        out.values(static_cast<Eigen::Index>(k), d) = y;
      }
    }
  });
  summarize(out);
  return out;
}

/// Posterior mean, sd and equal-tailed 95% interval of Y on every (target, year, period).
inline std::vector<PredictionRecord> predict(const PosteriorDraws& draws, const TargetQuery& query,
                                             const FittedModel& model) {
  return predictive_samples(draws, query, model).records;
}

struct RatioEntry {
  std::string unit_id;
  int year = 0;
  int period = 1;
  double estimate = 0.0;
  double prediction = 0.0;
  double ratio = std::numeric_limits<double>::quiet_NaN();
  bool flagged = false;  // |prediction| < 1e-12, excluded from the summary
};

struct RatioDiagnostic {
  std::vector<RatioEntry> entries;
  double min = 0.0, q05 = 0.0, q25 = 0.0, median = 0.0, q75 = 0.0, q95 = 0.0, max = 0.0;

  std::vector<double> ratios() const {
    std::vector<double> out;
    for (const auto& e : entries)
      if (!e.flagged) out.push_back(e.ratio);
    return out;
  }
};

/// R(A) = Z / Yhat for every held-out datum with a matching successful prediction.
inline RatioDiagnostic ratio_diagnostic(std::span<const SurveyDatum> held_out,
                                        std::span<const PredictionRecord> predictions) {
  std::map<std::tuple<std::string, int, int>, const PredictionRecord*> index;
  for (const auto& p : predictions)
    if (p.ok()) index[{p.target_id, p.year, p.period}] = &p;

  RatioDiagnostic out;
  for (const auto& d : held_out) {
    auto it = index.find({d.unit_id, d.year, d.period});
    if (it == index.end()) continue;
    RatioEntry e{d.unit_id, d.year, d.period, d.estimate, it->second->mean};
    if (std::abs(e.prediction) < 1e-12) {
      e.flagged = true;
    } else {
      e.ratio = e.estimate / e.prediction;
    }
    out.entries.push_back(e);
  }
  if (out.entries.empty()) throw ConfigurationError("ratio_diagnostic: no held-out datum matches a prediction");

  auto r = out.ratios();
  std::sort(r.begin(), r.end());
  if (!r.empty()) {
    out.min = r.front();
    out.max = r.back();
    out.q05 = sorted_quantile(r, 0.05);
    out.q25 = sorted_quantile(r, 0.25);
    out.median = sorted_quantile(r, 0.5);
    out.q75 = sorted_quantile(r, 0.75);
    out.q95 = sorted_quantile(r, 0.95);
  }
  return out;
}

struct GridPoint {
  std::size_t spatial_knots = 5;
  double spatial_radius_multiplier = 1.1;
  double temporal_radius = 1.1;

  friend bool operator==(const GridPoint&, const GridPoint&) = default;
};

struct GridResult {
  GridPoint point;
  double error = std::numeric_limits<double>::quiet_NaN();  // sum of squared hold-out residuals
  std::size_t predicted = 0;
  std::string failure;

  bool ok() const { return failure.empty(); }
};

struct HoldoutSearchResult {
  std::vector<GridResult> table;
  std::optional<std::size_t> best;
};

/// Splits the data into training and the (year, period) groups listed in `holdout`.
inline std::pair<std::vector<SurveyDatum>, std::vector<SurveyDatum>> split_holdout(
    std::span<const SurveyDatum> data, std::span<const std::pair<int, int>> holdout) {
  std::vector<SurveyDatum> train;
  std::vector<SurveyDatum> held;
  for (const auto& d : data) {
    bool out = std::any_of(holdout.begin(), holdout.end(),
                           [&](const auto& g) { return g.first == d.year && g.second == d.period; });
    (out ? held : train).push_back(d);
  }
  return {std::move(train), std::move(held)};
}

/// Predictions on the supports of `held_out` data from a fitted result.
inline std::vector<PredictionRecord> predict_supports(const FitResult& fit, const FitProblem& problem,
                                                      std::span<const SurveyDatum> held_out,
                                                      const ModelConfig& config) {
  std::vector<PredictionRecord> out;
  std::map<std::string, std::vector<std::pair<int, int>>> periods_by_unit;
  for (const auto& d : held_out) periods_by_unit[d.unit_id].emplace_back(d.year, d.period);
  for (const auto& [id, periods] : periods_by_unit) {
    TargetQuery q;
    q.targets = SupportSet({resolve_unit(problem, id)}, false);
    q.periods = periods;
    q.mc_points = config.basis.mc_points;
    q.seed = design_seed(config.chain.seed);
    q.threads = config.threads;
    auto recs = predict(fit.draws, q, fit.model);
    out.insert(out.end(), recs.begin(), recs.end());
  }
  return out;
}

/// Fits every grid configuration on the training data and scores the squared hold-out
/// error. Failed fits are recorded and skipped; ties go to fewer spatial knots.
inline HoldoutSearchResult holdout_search(const FitProblem& problem, const ModelConfig& base,
                                          std::span<const GridPoint> grid,
                                          std::span<const std::pair<int, int>> holdout) {
  if (grid.empty()) throw ConfigurationError("empty configuration grid");
  auto [train, held] = split_holdout(problem.data, holdout);
  if (held.empty()) throw ConfigurationError("hold-out groups select no data");
  if (train.empty()) throw ConfigurationError("hold-out groups leave no training data");

  FitProblem training = problem;
  training.data = train;
  if (!training.years) {
    std::vector<std::pair<int, int>> all;
    for (const auto& d : problem.data) all.emplace_back(d.year, d.period);
    training.years = year_range(all);
  }

  HoldoutSearchResult result;
  for (const auto& point : grid) {
    GridResult row;
    row.point = point;
    try {
      ModelConfig cfg = base;
      cfg.basis.spatial_knots = point.spatial_knots;
      cfg.basis.spatial_radius_multiplier = point.spatial_radius_multiplier;
      cfg.basis.spatial_radius.reset();
      cfg.basis.temporal_radius = point.temporal_radius;
      auto fit = fit_model(training, cfg);
      auto preds = predict_supports(fit, training, held, cfg);
      std::map<std::tuple<std::string, int, int>, double> mean;
      for (const auto& p : preds)
        if (p.ok()) mean[{p.target_id, p.year, p.period}] = p.mean;
      double err = 0.0;
      for (const auto& d : held) {
        auto it = mean.find({d.unit_id, d.year, d.period});
        if (it == mean.end()) throw ConfigurationError("no prediction for held-out datum '" + d.unit_id + "'");
        err += (d.estimate - it->second) * (d.estimate - it->second);
        ++row.predicted;
      }
      row.error = err;
    } catch (const std::exception& e) {
      row.failure = e.what();
    }
    result.table.push_back(row);
  }

  for (std::size_t i = 0; i < result.table.size(); ++i) {
    const auto& row = result.table[i];
    if (!row.ok()) continue;
    if (!result.best) {
      result.best = i;
      continue;
    }
    const auto& best = result.table[*result.best];
    if (row.error < best.error || (row.error == best.error && row.point.spatial_knots < best.point.spatial_knots))
      result.best = i;
  }
  return result;
}

}  // namespace stcos
