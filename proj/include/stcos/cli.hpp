#pragma once

#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "stcos/stcos.hpp"

namespace stcos::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { ok = 0, usage = 1, input = 2, mismatch = 3, numerical = 4 };

inline constexpr int schema_version = 1;

// ---------------------------------------------------------------------------------------
// Config reading. Every object is checked against its allowed keys.

class ConfigError : public ConfigurationError {
public:
  using ConfigurationError::ConfigurationError;
};

namespace detail {

inline void allow_keys(const json& obj, const std::string& where, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  std::vector<std::string> unknown;
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key)) unknown.push_back(key);
  if (!unknown.empty()) {
    std::string msg = where + ": unknown key";
    msg += unknown.size() > 1 ? "s" : "";
    for (std::size_t i = 0; i < unknown.size(); ++i) msg += (i ? ", '" : " '") + unknown[i] + "'";
    throw ConfigError(msg);
  }
}

template <class T>
void read(const json& obj, const char* key, T& target, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    target = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline void read_prior(const json& obj, const char* key, InverseGammaPrior& prior, const std::string& where) {
  if (!obj.contains(key)) return;
  const std::string w = where + "." + key;
  allow_keys(obj[key], w, {"shape", "scale"});
  read(obj[key], "shape", prior.shape, w);
  read(obj[key], "scale", prior.scale, w);
}

inline std::vector<std::pair<int, int>> read_periods(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw ConfigError(where + ": expected a list of [year, period] pairs");
  std::vector<std::pair<int, int>> out;
  for (const auto& p : arr) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() || !p[1].is_number_integer())
      throw ConfigError(where + ": expected a list of [year, period] pairs");
    out.emplace_back(p[0].get<int>(), p[1].get<int>());
  }
  return out;
}

}  // namespace detail

struct InputPaths {
  std::optional<fs::path> fine;
  std::optional<fs::path> sources;
  std::optional<fs::path> estimates;
  std::optional<fs::path> edges;
  double moe_level = 0.90;
  std::optional<std::pair<int, int>> years;
};

struct PredictSettings {
  std::optional<fs::path> artifact;
  std::optional<fs::path> targets;
  std::vector<std::pair<int, int>> periods;
  std::optional<fs::path> holdout;
  FineScaleNoise noise = FineScaleNoise::fresh;
  bool reuse_observed_noise = true;
  std::optional<std::size_t> mc_points;
};

struct ValidateSettings {
  std::vector<GridPoint> grid;
  std::vector<std::pair<int, int>> holdout;
};

struct CliConfig {
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::optional<fs::path> out;
  InputPaths inputs;
  ModelConfig model;
  SimulationSettings simulation;
  PredictSettings predict;
  ValidateSettings validate;
  json raw = json::object();  // effective configuration, hashed into the manifest
};

/// Parses a configuration document. Relative paths resolve against `base`.
inline CliConfig parse_config(const json& doc, const fs::path& base) {
  using detail::allow_keys;
  using detail::read;
  allow_keys(doc, "config",
             {"schema_version", "seed", "threads", "out", "inputs", "model", "simulate", "predict", "validate"});
  if (!doc.contains("schema_version") || !doc["schema_version"].is_number_integer())
    throw ConfigError("config: missing integer `schema_version`");
  if (doc["schema_version"].get<int>() != schema_version)
    throw ConfigError("config: unsupported schema_version " + std::to_string(doc["schema_version"].get<int>()));

  CliConfig c;
  c.raw = doc;
  auto path_of = [&](const json& obj, const char* key, const std::string& where) -> std::optional<fs::path> {
    if (!obj.contains(key)) return std::nullopt;
    if (!obj[key].is_string()) throw ConfigError(where + "." + key + ": expected a path string");
    fs::path p = obj[key].get<std::string>();
    return p.is_absolute() ? p : base / p;
  };
  read(doc, "seed", c.seed, "config");
  read(doc, "threads", c.threads, "config");
  c.out = path_of(doc, "out", "config");

  if (doc.contains("inputs")) {
    const auto& in = doc["inputs"];
    allow_keys(in, "inputs", {"fine", "sources", "estimates", "edges", "moe_level", "first_year", "last_year"});
    c.inputs.fine = path_of(in, "fine", "inputs");
    c.inputs.sources = path_of(in, "sources", "inputs");
    c.inputs.estimates = path_of(in, "estimates", "inputs");
    c.inputs.edges = path_of(in, "edges", "inputs");
    read(in, "moe_level", c.inputs.moe_level, "inputs");
    if (in.contains("first_year") != in.contains("last_year"))
      throw ConfigError("inputs: first_year and last_year go together");
    if (in.contains("first_year")) {
      std::pair<int, int> y;
      read(in, "first_year", y.first, "inputs");
      read(in, "last_year", y.second, "inputs");
      c.inputs.years = y;
    }
  }

  if (doc.contains("model")) {
    const auto& m = doc["model"];
    allow_keys(m, "model", {"priors", "basis", "covariance", "chain"});
    if (m.contains("priors")) {
      allow_keys(m["priors"], "model.priors", {"sigma2_xi", "sigma2_K", "sigma2_mu"});
      detail::read_prior(m["priors"], "sigma2_xi", c.model.priors.sigma2_xi, "model.priors");
      detail::read_prior(m["priors"], "sigma2_K", c.model.priors.sigma2_k, "model.priors");
      detail::read_prior(m["priors"], "sigma2_mu", c.model.priors.sigma2_mu, "model.priors");
    }
    if (m.contains("basis")) {
      const auto& b = m["basis"];
      const std::string w = "model.basis";
      allow_keys(b, w,
                 {"spatial_knots", "knot_candidates", "knot_seed", "spatial_radius_multiplier", "spatial_radius",
                  "temporal_radius", "temporal_knots", "temporal_knot_count", "mc_points"});
      auto& s = c.model.basis;
      read(b, "spatial_knots", s.spatial_knots, w);
      read(b, "knot_candidates", s.knot_candidates, w);
      read(b, "knot_seed", s.knot_seed, w);
      read(b, "spatial_radius_multiplier", s.spatial_radius_multiplier, w);
      if (b.contains("spatial_radius")) {
        double ws = 0.0;
        read(b, "spatial_radius", ws, w);
        s.spatial_radius = ws;
      }
      read(b, "temporal_radius", s.temporal_radius, w);
      read(b, "temporal_knots", s.temporal_knots, w);
      read(b, "temporal_knot_count", s.temporal_knot_count, w);
      read(b, "mc_points", s.mc_points, w);
    }
    if (m.contains("covariance")) {
      const auto& v = m["covariance"];
      allow_keys(v, "model.covariance", {"rho", "propagator_scale", "propagator_rank"});
      read(v, "rho", c.model.covariance.rho, "model.covariance");
      read(v, "propagator_scale", c.model.covariance.propagator_scale, "model.covariance");
      read(v, "propagator_rank", c.model.covariance.propagator_rank, "model.covariance");
    }
    if (m.contains("chain")) {
      const auto& ch = m["chain"];
      allow_keys(ch, "model.chain", {"iterations", "burn_in", "thin"});
      read(ch, "iterations", c.model.chain.iterations, "model.chain");
      read(ch, "burn_in", c.model.chain.burn_in, "model.chain");
      read(ch, "thin", c.model.chain.thin, "model.chain");
    }
  }

  if (doc.contains("simulate")) {
    const auto& s = doc["simulate"];
    const std::string w = "simulate";
    allow_keys(s, w,
               {"grid_side", "cell_size", "coarse_side", "layout", "first_year", "years", "sigma2_xi", "sigma2_K",
                "sigma2_mu", "trend_mean", "survey_sd", "sd_jitter"});
    auto& sim = c.simulation;
    read(s, "grid_side", sim.grid_side, w);
    read(s, "cell_size", sim.cell_size, w);
    read(s, "coarse_side", sim.coarse_side, w);
    if (s.contains("layout")) {
      std::string layout;
      read(s, "layout", layout, w);
      if (layout == "recovery") sim.layout = PeriodLayout::recovery;
      else if (layout == "acs") sim.layout = PeriodLayout::acs;
      else throw ConfigError("simulate.layout: expected 'recovery' or 'acs'");
    }
    read(s, "first_year", sim.first_year, w);
    read(s, "years", sim.years, w);
    read(s, "sigma2_xi", sim.sigma2_xi, w);
    read(s, "sigma2_K", sim.sigma2_k, w);
    read(s, "sigma2_mu", sim.sigma2_mu, w);
    read(s, "trend_mean", sim.trend_mean, w);
    if (s.contains("survey_sd")) {
      if (!s["survey_sd"].is_object()) throw ConfigError("simulate.survey_sd: expected {\"period\": sd}");
      sim.survey_sd.clear();
      for (const auto& [key, value] : s["survey_sd"].items()) {
        auto period = io::parse_integer(key);
        if (!period || !value.is_number()) throw ConfigError("simulate.survey_sd: expected {\"period\": sd}");
        sim.survey_sd[static_cast<int>(*period)] = value.get<double>();
      }
    }
    read(s, "sd_jitter", sim.sd_jitter, w);
  }

  if (doc.contains("predict")) {
    const auto& p = doc["predict"];
    allow_keys(p, "predict",
               {"artifact", "targets", "periods", "holdout", "noise", "reuse_observed_noise", "mc_points"});
    c.predict.artifact = path_of(p, "artifact", "predict");
    c.predict.targets = path_of(p, "targets", "predict");
    c.predict.holdout = path_of(p, "holdout", "predict");
    if (p.contains("periods")) c.predict.periods = detail::read_periods(p["periods"], "predict.periods");
    if (p.contains("noise")) {
      std::string noise;
      read(p, "noise", noise, "predict");
      if (noise == "fresh") c.predict.noise = FineScaleNoise::fresh;
      else if (noise == "shared") c.predict.noise = FineScaleNoise::shared;
      else if (noise == "none") c.predict.noise = FineScaleNoise::none;
      else throw ConfigError("predict.noise: expected 'fresh', 'shared' or 'none'");
    }
    read(p, "reuse_observed_noise", c.predict.reuse_observed_noise, "predict");
    if (p.contains("mc_points")) {
      std::size_t h = 0;
      read(p, "mc_points", h, "predict");
      c.predict.mc_points = h;
    }
  }

  if (doc.contains("validate")) {
    const auto& v = doc["validate"];
    allow_keys(v, "validate", {"grid", "holdout"});
    if (v.contains("grid")) {
      if (!v["grid"].is_array()) throw ConfigError("validate.grid: expected a list");
      for (const auto& g : v["grid"]) {
        allow_keys(g, "validate.grid[]", {"spatial_knots", "spatial_radius_multiplier", "temporal_radius"});
        GridPoint point;
        point.spatial_radius_multiplier = c.model.basis.spatial_radius_multiplier;
        point.temporal_radius = c.model.basis.temporal_radius;
        read(g, "spatial_knots", point.spatial_knots, "validate.grid[]");
        read(g, "spatial_radius_multiplier", point.spatial_radius_multiplier, "validate.grid[]");
        read(g, "temporal_radius", point.temporal_radius, "validate.grid[]");
        c.validate.grid.push_back(point);
      }
    }
    if (v.contains("holdout")) c.validate.holdout = detail::read_periods(v["holdout"], "validate.holdout");
  }
  return c;
}

inline CliConfig load_config(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw InputError(path.string(), {std::string("invalid JSON: ") + e.what()});
  }
  return parse_config(doc, path.has_parent_path() ? path.parent_path() : fs::path("."));
}

/// Applies command-line overrides and propagates the seed and thread cap.
inline void apply_overrides(CliConfig& c, std::optional<std::uint64_t> seed, std::optional<unsigned> threads,
                            std::optional<fs::path> out) {
  if (seed) {
    c.seed = *seed;
    c.raw["seed"] = *seed;
  }
  if (threads) {
    c.threads = *threads;
    c.raw["threads"] = *threads;
  }
  if (out) {
    c.out = *out;
    c.raw["out"] = out->string();
  }
  c.model.chain.seed = c.seed;
  c.model.threads = std::max(1u, c.threads);
  c.simulation.seed = c.seed;
  c.simulation.model = c.model;
}

// ---------------------------------------------------------------------------------------
// Artifact directory

namespace detail {

inline json basis_json(const BasisSystem& b) {
  json knots = json::array();
  for (const auto& k : b.knots().spatial) knots.push_back({k.x, k.y});
  return {{"spatial_knots", knots},
          {"temporal_knots", b.knots().temporal},
          {"spatial_radius", b.spatial_radius()},
          {"temporal_radius", b.temporal_radius()}};
}

inline BasisSystem basis_from_json(const json& j) {
  KnotSet knots;
  for (const auto& k : j.at("spatial_knots")) knots.spatial.push_back({k.at(0).get<double>(), k.at(1).get<double>()});
  knots.temporal = j.at("temporal_knots").get<std::vector<double>>();
  return BasisSystem(std::move(knots), j.at("spatial_radius").get<double>(), j.at("temporal_radius").get<double>());
}

}  // namespace detail

inline void save_artifact(const fs::path& dir, const FitResult& fit, const std::vector<DesignRow>& design) {
  fs::create_directories(dir);
  io::save_supports(dir / "fine.geojson", fit.model.fine);

  std::vector<ArealUnit> observed_units;
  std::set<std::string> seen;
  std::ostringstream observed;
  observed << "datum,unit_id,year,period\n";
  for (const auto& o : fit.model.observed) {
    if (seen.insert(o.unit.id()).second) observed_units.push_back(o.unit);
    observed << o.datum << ',' << io::detail::csv_field(o.unit.id()) << ',' << o.year << ',' << o.period << '\n';
  }
  io::save_supports(dir / "observed.geojson", SupportSet(std::move(observed_units), false));
  io::write_text(dir / "observed.csv", observed.str());

  json model{{"schema_version", schema_version},
             {"basis", detail::basis_json(fit.model.basis)},
             {"first_year", fit.model.first_year},
             {"last_year", fit.model.last_year},
             {"fingerprint", fit.model.fingerprint()}};
  io::write_text(dir / "model.json", model.dump(1) + "\n");

  io::save_draws(dir / "draws.csv", fit.draws);
  json draws{{"config_hash", fit.draws.config_hash},
             {"seed", fit.draws.seed},
             {"iterations", fit.draws.iterations},
             {"burn_in", fit.draws.burn_in},
             {"thin", fit.draws.thin},
             {"stored", fit.draws.size()},
             {"warnings", fit.draws.warnings},
             {"diagnostics", io::diagnostics_json(fit.draws.diagnostics)}};
  io::write_text(dir / "draws.json", draws.dump(1) + "\n");

  io::save_matrix(dir / "K0", fit.structure.k0.base, true);
  io::save_matrix(dir / "sigma0", fit.structure.sigma0, true);
  io::save_matrix(dir / "joint", fit.structure.joint, true);
  io::save_matrix(dir / "propagator", fit.structure.propagator, false);
  io::save_design(dir / "design.csv", design, fit.model.fine);
}

struct Artifact {
  FittedModel model;
  PosteriorDraws draws;
  SupportSet observed_units;
};

inline Artifact load_artifact(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InputError(dir.string(), {"artifact directory not found"});
  Artifact a;
  a.model.fine = io::load_supports(dir / "fine.geojson", true);
  a.observed_units = io::load_supports(dir / "observed.geojson", false);

  json model;
  try {
    model = json::parse(io::read_text(dir / "model.json"));
    a.model.basis = detail::basis_from_json(model.at("basis"));
    a.model.first_year = model.at("first_year").get<int>();
    a.model.last_year = model.at("last_year").get<int>();
  } catch (const json::exception& e) {
    throw InputError((dir / "model.json").string(), {e.what()});
  }

  auto observed = io::read_csv(dir / "observed.csv");
  for (std::size_t r = 0; r < observed.rows.size(); ++r) {
    const auto& row = observed.rows[r];
    auto datum = io::parse_integer(row.at(0));
    auto year = io::parse_integer(row.at(2));
    auto period = io::parse_integer(row.at(3));
    auto idx = a.observed_units.find(row.at(1));
    if (!datum || !year || !period || !idx)
      throw InputError((dir / "observed.csv").string(), {"line " + std::to_string(observed.line_numbers[r]) + ": bad row"});
    a.model.observed.push_back({a.observed_units[*idx], static_cast<int>(*year), static_cast<int>(*period),
                                static_cast<std::size_t>(*datum)});
  }

  try {
    json meta = json::parse(io::read_text(dir / "draws.json"));
    a.draws.config_hash = meta.at("config_hash").get<std::string>();
    a.draws.seed = meta.at("seed").get<std::uint64_t>();
    a.draws.iterations = meta.at("iterations").get<long>();
    a.draws.burn_in = meta.at("burn_in").get<long>();
    a.draws.thin = meta.at("thin").get<long>();
  } catch (const json::exception& e) {
    throw InputError((dir / "draws.json").string(), {e.what()});
  }
  a.draws.records = io::load_draw_records(dir / "draws.csv");
  return a;
}

// ---------------------------------------------------------------------------------------
// Commands

struct Context {
  std::ostream& out;
  std::ostream& err;
};

inline fs::path require_out(const CliConfig& c) {
  if (!c.out) throw ConfigError("no output directory: pass --out or set `out`");
  return *c.out;
}

inline fs::path require_path(const std::optional<fs::path>& p, const char* what) {
  if (!p) throw ConfigError(std::string("missing `") + what + "` in the configuration");
  return *p;
}

inline io::RunManifest start_manifest(const char* command, const CliConfig& c) {
  io::RunManifest m;
  m.command = command;
  m.config = c.raw;
  m.seed = c.seed;
  return m;
}

inline void note_input(io::RunManifest& m, const std::optional<fs::path>& p) {
  if (p && fs::is_regular_file(*p)) m.input_digests[p->string()] = io::sha256_file(*p);
}

inline int cmd_simulate(const CliConfig& c, Context ctx) {
  const fs::path out = require_out(c);
  auto t0 = std::chrono::steady_clock::now();
  auto manifest = start_manifest("simulate", c);
  auto ds = simulate(c.simulation);

  io::save_supports(out / "fine.geojson", ds.fine);
  io::save_supports(out / "sources.geojson", ds.sources);
  io::save_estimates(out / "estimates.csv", ds.data);
  std::ostringstream truth;
  truth << "unit_id,year,period,truth\n";
  for (std::size_t i = 0; i < ds.data.size(); ++i)
    truth << io::detail::csv_field(ds.data[i].unit_id) << ',' << ds.data[i].year << ',' << ds.data[i].period << ','
          << io::format_double(ds.truth[i]) << '\n';
  io::write_text(out / "truth.csv", truth.str());
  std::ostringstream mu;
  mu << "unit_id,mu\n";
  for (std::size_t i = 0; i < ds.fine.size(); ++i)
    mu << io::detail::csv_field(ds.fine[i].id()) << ',' << io::format_double(ds.params.mu[static_cast<Eigen::Index>(i)])
       << '\n';
  io::write_text(out / "truth_mu.csv", mu.str());

  manifest.model_fingerprint =
      model_fingerprint(ds.structure.basis, ds.fine, ds.structure.first_year, ds.structure.last_year);
  manifest.extra = {{"estimates", ds.data.size()}, {"fine_units", ds.fine.size()}};
  manifest.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::write_text(out / "manifest.json", manifest.to_json().dump(1) + "\n");
  ctx.out << "simulated " << ds.data.size() << " estimates on " << ds.fine.size() << " fine units -> " << out.string()
          << '\n';
  return ok;
}

inline FitProblem load_problem(const CliConfig& c, io::RunManifest* manifest) {
  FitProblem problem;
  const fs::path fine = require_path(c.inputs.fine, "inputs.fine");
  const fs::path estimates = require_path(c.inputs.estimates, "inputs.estimates");
  problem.fine = io::load_supports(fine, true);
  if (c.inputs.sources) problem.sources = io::load_supports(*c.inputs.sources, false);
  problem.data = io::load_estimates(estimates, c.inputs.moe_level);
  if (c.inputs.edges) problem.adjacency = io::load_edges(*c.inputs.edges, problem.fine);
  problem.years = c.inputs.years;
  if (manifest) {
    note_input(*manifest, c.inputs.fine);
    note_input(*manifest, c.inputs.sources);
    note_input(*manifest, c.inputs.estimates);
    note_input(*manifest, c.inputs.edges);
  }
  return problem;
}

inline int cmd_fit(const CliConfig& c, Context ctx) {
  const fs::path out = require_out(c);
  auto t0 = std::chrono::steady_clock::now();
  auto manifest = start_manifest("fit", c);
  auto problem = load_problem(c, &manifest);
  auto fit = fit_model(problem, c.model);

  // Rebuilt with the same seed as the fit, so identical to the rows the chain used.
  std::vector<PeriodSupport> supports;
  for (const auto& o : fit.model.observed) supports.push_back({o.unit, o.year, o.period});
  auto design = build_design(fit.model.basis, supports, problem.fine,
                             {c.model.basis.mc_points, design_seed(c.model.chain.seed), c.model.threads});
  save_artifact(out, fit, design);

  manifest.model_fingerprint = fit.model.fingerprint();
  manifest.extra = {{"estimates", problem.data.size()},
                    {"basis_size", fit.model.basis.size()},
                    {"k0_rank", fit.structure.k0.rank()},
                    {"draws", fit.draws.size()},
                    {"warnings", fit.draws.warnings}};
  manifest.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::write_text(out / "manifest.json", manifest.to_json().dump(1) + "\n");
  for (const auto& w : fit.draws.warnings) ctx.err << "warning: " << w << '\n';
  ctx.out << "fitted " << problem.data.size() << " estimates, r = " << fit.model.basis.size() << ", "
          << fit.draws.size() << " draws -> " << out.string() << '\n';
  return ok;
}

inline int cmd_predict(const CliConfig& c, Context ctx) {
  const fs::path out = require_out(c);
  auto t0 = std::chrono::steady_clock::now();
  auto manifest = start_manifest("predict", c);
  const fs::path dir = require_path(c.predict.artifact, "predict.artifact");
  auto artifact = load_artifact(dir);
  // A fine set named in the config must be the one the artifact was fitted on.
  if (c.inputs.fine) {
    artifact.model.fine = io::load_supports(*c.inputs.fine, true);
    note_input(manifest, c.inputs.fine);
  }
  for (const char* name : {"model.json", "draws.csv", "draws.json", "fine.geojson"})
    manifest.input_digests[(dir / name).string()] = io::sha256_file(dir / name);
  if (!c.predict.targets && !c.predict.holdout)
    throw ConfigError("predict needs `predict.targets` and/or `predict.holdout`");

  TargetQuery base;
  base.mc_points = c.predict.mc_points.value_or(c.model.basis.mc_points);
  base.seed = derive_seed(c.seed, 0x9e3d);
  base.noise = c.predict.noise;
  base.reuse_observed_noise = c.predict.reuse_observed_noise;
  base.threads = c.model.threads;

  std::optional<SupportSet> targets;
  std::size_t written = 0;
  if (c.predict.targets) {
    if (c.predict.periods.empty()) throw ConfigError("predict.periods: need at least one [year, period]");
    targets = io::load_supports(*c.predict.targets, false);
    note_input(manifest, c.predict.targets);
    TargetQuery q = base;
    q.targets = *targets;
    q.periods = c.predict.periods;
    auto records = predict(artifact.draws, q, artifact.model);
    for (const auto& r : records)
      if (!r.ok()) ctx.err << "warning: " << r.target_id << " " << r.year << "/" << r.period << ": " << r.error << '\n';
    io::save_predictions(out / "predictions.csv", records);
    written = records.size();
  }

  if (c.predict.holdout) {
    auto held = io::load_estimates(*c.predict.holdout, c.inputs.moe_level);
    note_input(manifest, c.predict.holdout);
    std::map<std::string, std::vector<std::pair<int, int>>> periods_by_unit;
    for (const auto& d : held) periods_by_unit[d.unit_id].emplace_back(d.year, d.period);
    std::vector<PredictionRecord> preds;
    std::vector<std::string> unknown;
    for (const auto& [id, periods] : periods_by_unit) {
      const ArealUnit* unit = nullptr;
      if (targets && targets->find(id)) unit = &(*targets)[*targets->find(id)];
      else if (auto i = artifact.observed_units.find(id)) unit = &artifact.observed_units[*i];
      else if (auto j = artifact.model.fine.find(id)) unit = &artifact.model.fine[*j];
      if (!unit) {
        unknown.push_back("hold-out unit '" + id + "' has no geometry");
        continue;
      }
      TargetQuery q = base;
      q.targets = SupportSet({*unit}, false);
      q.periods = periods;
      auto recs = predict(artifact.draws, q, artifact.model);
      preds.insert(preds.end(), recs.begin(), recs.end());
    }
    if (!unknown.empty()) throw InputError(c.predict.holdout->string(), unknown);
    io::save_predictions(out / "holdout_predictions.csv", preds);
    auto diag = ratio_diagnostic(held, preds);
    io::save_ratios(out / "ratios.csv", diag);
    io::write_text(out / "ratio_histogram.svg", io::histogram_svg(diag.ratios(), "R(A) = estimate / prediction"));
    manifest.extra["ratio_summary"] = {{"min", diag.min},       {"q05", diag.q05}, {"q25", diag.q25},
                                       {"median", diag.median}, {"q75", diag.q75}, {"q95", diag.q95},
                                       {"max", diag.max},       {"pairs", diag.entries.size()}};
    ctx.out << "hold-out: " << diag.entries.size() << " pairs, median R(A) = " << diag.median << '\n';
  } else {
    ctx.out << "notice: no hold-out estimates given; ratio diagnostics skipped\n";
  }

  manifest.model_fingerprint = artifact.model.fingerprint();
  manifest.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::write_text(out / "manifest.json", manifest.to_json().dump(1) + "\n");
  ctx.out << "predicted " << written << " target records -> " << out.string() << '\n';
  return ok;
}

inline int cmd_validate(const CliConfig& c, Context ctx) {
  const fs::path out = require_out(c);
  auto t0 = std::chrono::steady_clock::now();
  auto manifest = start_manifest("validate", c);
  if (c.validate.grid.empty()) throw ConfigError("validate.grid: need at least one configuration");
  if (c.validate.holdout.empty()) throw ConfigError("validate.holdout: need at least one [year, period] group");
  auto problem = load_problem(c, &manifest);
  auto result = holdout_search(problem, c.model, c.validate.grid, c.validate.holdout);
  io::save_grid_table(out / "grid.csv", result);
  if (result.best) {
    const auto& best = result.table[*result.best];
    manifest.extra["best"] = {{"spatial_knots", best.point.spatial_knots},
                              {"spatial_radius_multiplier", best.point.spatial_radius_multiplier},
                              {"temporal_radius", best.point.temporal_radius},
                              {"holdout_sse", best.error}};
    ctx.out << "best: r_s = " << best.point.spatial_knots << ", w_s x " << best.point.spatial_radius_multiplier
            << ", w_t = " << best.point.temporal_radius << " (hold-out SSE " << best.error << ")\n";
  }
  for (const auto& row : result.table)
    if (!row.ok()) ctx.err << "warning: r_s = " << row.point.spatial_knots << " failed: " << row.failure << '\n';
  manifest.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::write_text(out / "manifest.json", manifest.to_json().dump(1) + "\n");
  if (!result.best) {
    ctx.err << "error: every grid configuration failed\n";
    return numerical;
  }
  return ok;
}

/// Maps an exception to the documented exit code and writes the message.
inline int report(std::ostream& err, const std::exception_ptr& ep) {
  try {
    std::rethrow_exception(ep);
  } catch (const ArtifactMismatch& e) {
    err << "error: " << e.what() << '\n';
    return mismatch;
  } catch (const NumericalFailure& e) {
    err << "error: numerical failure: " << e.what() << '\n';
    return numerical;
  } catch (const LinearAlgebraError& e) {
    err << "error: numerical failure: " << e.what() << '\n';
    return numerical;
  } catch (const StabilityError& e) {
    err << "error: numerical failure: " << e.what() << '\n';
    return numerical;
  } catch (const InputError& e) {
    err << "error: " << e.source() << ":\n";
    for (const auto& issue : e.issues()) err << "  " << issue << '\n';
    return input;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return input;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return input;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return numerical;
  }
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Spatio-temporal change-of-support estimation", "stcos"};
  app.require_subcommand(1);
  app.set_version_flag("--version", io::version);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::string out_dir;
  for (const char* name : {"simulate", "fit", "predict", "validate"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON configuration file")->required();
    sub->add_option("--seed", seed, "seed for every stochastic step");
    sub->add_option("--threads", threads, "worker thread cap")->check(CLI::PositiveNumber);
    sub->add_option("--out", out_dir, "output directory");
  }
  app.get_subcommand("simulate")->description("draw a synthetic dataset with known parameters");
  app.get_subcommand("fit")->description("fit the model and write an artifact directory");
  app.get_subcommand("predict")->description("predict target supports from a fitted artifact");
  app.get_subcommand("validate")->description("grid search over basis settings by hold-out error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return usage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    CliConfig c = load_config(config_path);
    std::optional<fs::path> out_override;
    if (!out_dir.empty()) out_override = fs::path(out_dir);
    apply_overrides(c, seed, threads, out_override);
    Context ctx{out, err};
    if (command == "simulate") return cmd_simulate(c, ctx);
    if (command == "fit") return cmd_fit(c, ctx);
    if (command == "predict") return cmd_predict(c, ctx);
    return cmd_validate(c, ctx);
  } catch (...) {
    return report(err, std::current_exception());
  }
}

}  // namespace stcos::cli
