#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <openssl/evp.h>

#include "json.hpp"

#include "stcos/error.hpp"
#include "stcos/geometry.hpp"
#include "stcos/model.hpp"
#include "stcos/predict.hpp"
#include "stcos/sampler.hpp"

namespace stcos::io {

namespace fs = std::filesystem;
using nlohmann::json;

/// Shortest-safe lossless text form of a double.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_integer(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  long long v = std::strtoll(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size()) return std::nullopt;
  return v;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(path.string(), {"cannot open file"});
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError(path.string(), {"cannot open file for writing"});
  out << text;
  if (!out) throw InputError(path.string(), {"write failed"});
}

// ---------------------------------------------------------------------------------------
// CSV

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;

  std::optional<std::size_t> column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  }
};

namespace detail {

inline bool valid_utf8(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size()) {
    auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra;
    if (c < 0x80) extra = 0;
    else if ((c >> 5) == 0x6) extra = 1;
    else if ((c >> 4) == 0xe) extra = 2;
    else if ((c >> 3) == 0x1e) extra = 3;
    else return false;
    if (s.size() - i <= extra) return false;
    for (std::size_t k = 1; k <= extra; ++k)
      if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
    i += extra + 1;
  }
  return true;
}

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(field));
      field.clear();
    } else {
      field += c;
    }
  }
  out.push_back(trim(field));
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

inline CsvTable read_csv(const fs::path& path) {
  std::string text = read_text(path);
  if (!detail::valid_utf8(text)) throw InputError(path.string(), {"file is not valid UTF-8"});
  if (text.size() >= 3 && text.compare(0, 3, "\xEF\xBB\xBF") == 0) text.erase(0, 3);
  CsvTable table;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_csv_line(line);
    if (table.header.empty()) {
      table.header = fields;
    } else {
      table.rows.push_back(std::move(fields));
      table.line_numbers.push_back(number);
    }
  }
  if (table.header.empty()) throw InputError(path.string(), {"missing header row"});
  return table;
}

// ---------------------------------------------------------------------------------------
// GeoJSON

namespace detail {

inline Ring parse_ring(const json& coords) {
  Ring ring;
  for (const auto& pt : coords) {
    if (!pt.is_array() || pt.size() < 2 || !pt[0].is_number() || !pt[1].is_number())
      throw GeometryError("coordinate is not a [x, y] pair");
    ring.push_back({pt[0].get<double>(), pt[1].get<double>()});
  }
  return ring;
}

inline Polygon parse_polygon(const json& rings) {
  if (!rings.is_array() || rings.empty()) throw GeometryError("polygon has no rings");
  Polygon poly;
  poly.outer = parse_ring(rings[0]);
  for (std::size_t k = 1; k < rings.size(); ++k) poly.holes.push_back(parse_ring(rings[k]));
  return poly;
}

inline json ring_json(const Ring& ring) {
  json out = json::array();
  for (const auto& p : ring) out.push_back({p.x, p.y});
  return out;
}

}  // namespace detail

/// Units from a GeoJSON FeatureCollection; each feature needs an `id` (property or member)
/// and Polygon/MultiPolygon geometry. Problems are collected per feature and thrown together.
inline SupportSet parse_supports(const std::string& text, const std::string& source, bool disjoint) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError(source, {std::string("invalid JSON: ") + e.what()});
  }
  if (!doc.is_object() || doc.value("type", "") != "FeatureCollection" || !doc.contains("features") ||
      !doc["features"].is_array())
    throw InputError(source, {"not a GeoJSON FeatureCollection"});

  std::vector<std::string> issues;
  std::vector<ArealUnit> units;
  const auto& features = doc["features"];
  for (std::size_t f = 0; f < features.size(); ++f) {
    const auto& feat = features[f];
    std::string where = "feature " + std::to_string(f);
    std::optional<std::string> id;
    auto id_from = [](const json& v) -> std::optional<std::string> {
      if (v.is_string()) return v.get<std::string>();
      if (v.is_number_integer()) return std::to_string(v.get<long long>());
      return std::nullopt;
    };
    if (feat.contains("properties") && feat["properties"].is_object() && feat["properties"].contains("id"))
      id = id_from(feat["properties"]["id"]);
    if (!id && feat.contains("id")) id = id_from(feat["id"]);
    if (!id) {
      issues.push_back(where + ": missing `id`");
      continue;
    }
    where += " ('" + *id + "')";
    if (!feat.contains("geometry") || !feat["geometry"].is_object()) {
      issues.push_back(where + ": missing geometry");
      continue;
    }
    const auto& geom = feat["geometry"];
    std::string type = geom.value("type", "");
    try {
      std::vector<Polygon> parts;
      if (type == "Polygon") {
        parts.push_back(detail::parse_polygon(geom.at("coordinates")));
      } else if (type == "MultiPolygon") {
        for (const auto& p : geom.at("coordinates")) parts.push_back(detail::parse_polygon(p));
      } else {
        issues.push_back(where + ": unsupported geometry type '" + type + "'");
        continue;
      }
      ArealUnit unit(*id, std::move(parts));
      if (!(unit.area() > 0.0)) {
        issues.push_back(where + ": zero area");
        continue;
      }
      units.push_back(std::move(unit));
    } catch (const GeometryError& e) {
      issues.push_back(where + ": " + e.what());
    } catch (const json::exception& e) {
      issues.push_back(where + ": " + e.what());
    }
  }
  if (!issues.empty()) throw InputError(source, issues);
  try {
    return SupportSet(std::move(units), disjoint);
  } catch (const Error& e) {
    throw InputError(source, {e.what()});
  }
}

inline SupportSet load_supports(const fs::path& path, bool disjoint) {
  return parse_supports(read_text(path), path.string(), disjoint);
}

inline json supports_json(const SupportSet& set) {
  json features = json::array();
  for (const auto& u : set) {
    json geometry;
    if (u.parts().size() == 1) {
      json rings = json::array();
      rings.push_back(detail::ring_json(u.parts()[0].outer));
      for (const auto& h : u.parts()[0].holes) rings.push_back(detail::ring_json(h));
      geometry = {{"type", "Polygon"}, {"coordinates", rings}};
    } else {
      json polys = json::array();
      for (const auto& part : u.parts()) {
        json rings = json::array();
        rings.push_back(detail::ring_json(part.outer));
        for (const auto& h : part.holes) rings.push_back(detail::ring_json(h));
        polys.push_back(rings);
      }
      geometry = {{"type", "MultiPolygon"}, {"coordinates", polys}};
    }
    features.push_back({{"type", "Feature"}, {"properties", {{"id", u.id()}}}, {"geometry", geometry}});
  }
  return {{"type", "FeatureCollection"}, {"features", features}};
}

inline void save_supports(const fs::path& path, const SupportSet& set) {
  write_text(path, supports_json(set).dump(1) + "\n");
}

/// Edge-list override: CSV of `i,j` unit-id pairs.
inline AdjacencyMatrix load_edges(const fs::path& path, const SupportSet& fine) {
  auto table = read_csv(path);
  std::vector<std::string> issues;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  auto resolve = [&](const std::string& id, std::size_t line) -> std::optional<std::size_t> {
    auto idx = fine.find(id);
    if (!idx) issues.push_back("line " + std::to_string(line) + ": unknown unit '" + id + "'");
    return idx;
  };
  // The header row is required; its names are not checked.
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    std::size_t line = table.line_numbers[r];
    if (row.size() < 2) {
      issues.push_back("line " + std::to_string(line) + ": expected two columns");
      continue;
    }
    auto a = resolve(row[0], line);
    auto b = resolve(row[1], line);
    if (a && b) {
      if (*a == *b) {
        issues.push_back("line " + std::to_string(line) + ": self edge");
        continue;
      }
      edges.emplace_back(*a, *b);
    }
  }
  if (!issues.empty()) throw InputError(path.string(), issues);
  return adjacency_from_edges(fine.size(), edges);
}

// ---------------------------------------------------------------------------------------
// Estimates

/// Two-sided normal critical value for a confidence level, rounded to 4 decimals
/// (0.90 -> 1.6449).
inline double critical_value(double level) {
  if (!(level > 0.0 && level < 1.0)) throw DomainError("moe_level must lie in (0, 1)");
  boost::math::normal_distribution<double> standard;
  double z = boost::math::quantile(standard, 0.5 + 0.5 * level);
  return std::round(z * 1e4) / 1e4;
}

/// Estimates CSV: `unit_id, year, period, estimate` plus either `sd` (used verbatim) or
/// `moe` with an optional per-row `moe_level` (default `moe_level`). Row problems are
/// accumulated and reported together.
inline std::vector<SurveyDatum> load_estimates(const fs::path& path, double moe_level = 0.90) {
  auto table = read_csv(path);
  std::vector<std::string> issues;
  auto need = [&](const char* name) {
    auto c = table.column(name);
    if (!c) issues.push_back(std::string("header: missing column `") + name + "`");
    return c;
  };
  auto c_unit = need("unit_id");
  auto c_year = need("year");
  auto c_period = need("period");
  auto c_est = need("estimate");
  auto c_sd = table.column("sd");
  auto c_moe = table.column("moe");
  auto c_level = table.column("moe_level");
  if (!c_sd && !c_moe) issues.push_back("header: need an `sd` or a `moe` column");
  if (!issues.empty()) throw InputError(path.string(), issues);

  std::vector<SurveyDatum> out;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const std::string where = "line " + std::to_string(table.line_numbers[r]);
    if (row.size() != table.header.size()) {
      issues.push_back(where + ": expected " + std::to_string(table.header.size()) + " fields, found " +
                       std::to_string(row.size()));
      continue;
    }
    SurveyDatum d;
    d.unit_id = row[*c_unit];
    bool ok = true;
    auto year = parse_integer(row[*c_year]);
    auto period = parse_integer(row[*c_period]);
    auto est = parse_double(row[*c_est]);
    if (d.unit_id.empty()) issues.push_back(where + ": empty unit_id"), ok = false;
    if (!year) issues.push_back(where + ": malformed year '" + row[*c_year] + "'"), ok = false;
    if (!period || *period < 1) issues.push_back(where + ": malformed period '" + row[*c_period] + "'"), ok = false;
    if (!est || !std::isfinite(*est)) issues.push_back(where + ": malformed estimate '" + row[*c_est] + "'"), ok = false;

    std::optional<double> sd;
    if (c_sd && !row[*c_sd].empty()) {
      sd = parse_double(row[*c_sd]);
      if (!sd) issues.push_back(where + ": malformed sd '" + row[*c_sd] + "'"), ok = false;
    } else if (c_moe) {
      auto moe = parse_double(row[*c_moe]);
      double level = moe_level;
      if (c_level && !row[*c_level].empty()) {
        auto lv = parse_double(row[*c_level]);
        if (!lv) issues.push_back(where + ": malformed moe_level '" + row[*c_level] + "'"), ok = false;
        else level = *lv;
      }
      if (!moe) {
        issues.push_back(where + ": malformed moe '" + row[*c_moe] + "'");
        ok = false;
      } else {
        try {
          sd = *moe / critical_value(level);
        } catch (const DomainError& e) {
          issues.push_back(where + ": " + e.what());
          ok = false;
        }
      }
    } else {
      issues.push_back(where + ": no sd or moe value");
      ok = false;
    }
    if (ok && (!(*sd > 0.0) || !std::isfinite(*sd))) {
      issues.push_back(where + ": sd must be positive");
      ok = false;
    }
    if (!ok) continue;
    d.year = static_cast<int>(*year);
    d.period = static_cast<int>(*period);
    d.estimate = *est;
    d.sd = *sd;
    out.push_back(std::move(d));
  }
  if (!issues.empty()) throw InputError(path.string(), issues);
  return out;
}

inline void save_estimates(const fs::path& path, const std::vector<SurveyDatum>& data) {
  std::ostringstream os;
  os << "unit_id,year,period,estimate,sd\n";
  for (const auto& d : data)
    os << detail::csv_field(d.unit_id) << ',' << d.year << ',' << d.period << ',' << format_double(d.estimate) << ','
       << format_double(d.sd) << '\n';
  write_text(path, os.str());
}

// ---------------------------------------------------------------------------------------
// Matrices

/// Row-major float64 dump with a JSON sidecar describing its shape.
inline void save_matrix(const fs::path& base, const Eigen::MatrixXd& m, bool symmetric) {
  fs::path bin = base;
  bin += ".bin";
  fs::path meta = base;
  meta += ".json";
  if (base.has_parent_path()) fs::create_directories(base.parent_path());
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw InputError(bin.string(), {"cannot open file for writing"});
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
  json header{{"rows", m.rows()}, {"cols", m.cols()}, {"symmetric", symmetric}, {"dtype", "float64"},
              {"order", "row-major"}, {"endianness", "little"}};
  write_text(meta, header.dump(1) + "\n");
}

inline Eigen::MatrixXd load_matrix(const fs::path& base) {
  fs::path bin = base;
  bin += ".bin";
  fs::path meta = base;
  meta += ".json";
  json header = json::parse(read_text(meta));
  auto rows = header.at("rows").get<Eigen::Index>();
  auto cols = header.at("cols").get<Eigen::Index>();
  std::string bytes = read_text(bin);
  if (bytes.size() != static_cast<std::size_t>(rows * cols) * sizeof(double))
    throw InputError(bin.string(), {"size does not match header"});
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
  std::memcpy(rm.data(), bytes.data(), bytes.size());
  return rm;
}

/// Design matrix CSV: datum id, basis columns psi_0..psi_{r-1}, fine-unit columns.
inline void save_design(const fs::path& path, const std::vector<DesignRow>& rows, const SupportSet& fine) {
  std::ostringstream os;
  os << "datum_id";
  std::size_t r = rows.empty() ? 0 : static_cast<std::size_t>(rows.front().psi.size());
  for (std::size_t j = 0; j < r; ++j) os << ",psi_" << j;
  for (const auto& u : fine) os << ',' << detail::csv_field("h_" + u.id());
  os << '\n';
  for (const auto& row : rows) {
    os << detail::csv_field(row.unit_id + "@" + std::to_string(row.year) + "/" + std::to_string(row.period));
    for (Eigen::Index j = 0; j < row.psi.size(); ++j) os << ',' << format_double(row.psi[j]);
    for (Eigen::Index i = 0; i < row.overlap.size(); ++i) os << ',' << format_double(row.overlap[i]);
    os << '\n';
  }
  write_text(path, os.str());
}

// ---------------------------------------------------------------------------------------
// Draws

inline void save_draws(const fs::path& path, const PosteriorDraws& draws) {
  std::ostringstream os;
  os << "draw,sigma2_xi,sigma2_K,sigma2_mu";
  if (!draws.empty()) {
    const auto& first = draws.records.front();
    for (Eigen::Index i = 0; i < first.mu.size(); ++i) os << ",mu_" << i;
    for (Eigen::Index j = 0; j < first.eta.size(); ++j) os << ",eta_" << j;
    for (Eigen::Index k = 0; k < first.xi.size(); ++k) os << ",xi_" << k;
  }
  os << '\n';
  for (std::size_t d = 0; d < draws.size(); ++d) {
    const auto& p = draws.records[d];
    os << d << ',' << format_double(p.sigma2_xi) << ',' << format_double(p.sigma2_k) << ','
       << format_double(p.sigma2_mu);
    for (Eigen::Index i = 0; i < p.mu.size(); ++i) os << ',' << format_double(p.mu[i]);
    for (Eigen::Index j = 0; j < p.eta.size(); ++j) os << ',' << format_double(p.eta[j]);
    for (Eigen::Index k = 0; k < p.xi.size(); ++k) os << ',' << format_double(p.xi[k]);
    os << '\n';
  }
  write_text(path, os.str());
}

inline std::vector<ProcessParams> load_draw_records(const fs::path& path) {
  auto table = read_csv(path);
  Eigen::Index nmu = 0, neta = 0, nxi = 0;
  for (const auto& h : table.header) {
    if (h.rfind("mu_", 0) == 0) ++nmu;
    else if (h.rfind("eta_", 0) == 0) ++neta;
    else if (h.rfind("xi_", 0) == 0) ++nxi;
  }
  std::vector<ProcessParams> out;
  std::vector<std::string> issues;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    if (row.size() != table.header.size()) {
      issues.push_back("line " + std::to_string(table.line_numbers[r]) + ": wrong field count");
      continue;
    }
    std::vector<double> v;
    bool ok = true;
    for (std::size_t c = 1; c < row.size(); ++c) {
      auto x = parse_double(row[c]);
      if (!x) {
        issues.push_back("line " + std::to_string(table.line_numbers[r]) + ": malformed value '" + row[c] + "'");
        ok = false;
        break;
      }
      v.push_back(*x);
    }
    if (!ok) continue;
    ProcessParams p;
    p.sigma2_xi = v[0];
    p.sigma2_k = v[1];
    p.sigma2_mu = v[2];
    p.mu = Eigen::Map<Eigen::VectorXd>(v.data() + 3, nmu);
    p.eta = Eigen::Map<Eigen::VectorXd>(v.data() + 3 + nmu, neta);
    p.xi = Eigen::Map<Eigen::VectorXd>(v.data() + 3 + nmu + neta, nxi);
    out.push_back(std::move(p));
  }
  if (!issues.empty()) throw InputError(path.string(), issues);
  return out;
}

inline json diagnostics_json(const std::vector<ParameterSummary>& diag) {
  json out = json::array();
  for (const auto& s : diag) {
    auto finite_or_null = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    out.push_back({{"name", s.name}, {"mean", finite_or_null(s.mean)}, {"sd", finite_or_null(s.sd)},
                   {"ess", finite_or_null(s.ess)}, {"split_rhat", finite_or_null(s.split_rhat)}});
  }
  return out;
}

// ---------------------------------------------------------------------------------------
// Predictions, ratios, grid table, SVG

inline void save_predictions(const fs::path& path, const std::vector<PredictionRecord>& records) {
  std::ostringstream os;
  os << "target_id,year,period,mean,sd,lo95,hi95\n";
  for (const auto& r : records) {
    if (!r.ok()) continue;
    os << detail::csv_field(r.target_id) << ',' << r.year << ',' << r.period << ',' << format_double(r.mean) << ','
       << format_double(r.sd) << ',' << format_double(r.lo95) << ',' << format_double(r.hi95) << '\n';
  }
  write_text(path, os.str());
}

inline std::vector<PredictionRecord> load_predictions(const fs::path& path) {
  auto table = read_csv(path);
  std::vector<std::string> issues;
  std::vector<PredictionRecord> out;
  const std::vector<std::string> expected{"target_id", "year", "period", "mean", "sd", "lo95", "hi95"};
  if (table.header != expected) throw InputError(path.string(), {"unexpected header"});
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const std::string where = "line " + std::to_string(table.line_numbers[r]);
    if (row.size() != expected.size()) {
      issues.push_back(where + ": wrong field count");
      continue;
    }
    auto year = parse_integer(row[1]);
    auto period = parse_integer(row[2]);
    std::array<std::optional<double>, 4> v{parse_double(row[3]), parse_double(row[4]), parse_double(row[5]),
                                           parse_double(row[6])};
    if (!year || !period || !v[0] || !v[1] || !v[2] || !v[3]) {
      issues.push_back(where + ": malformed value");
      continue;
    }
    PredictionRecord p;
    p.target_id = row[0];
    p.year = static_cast<int>(*year);
    p.period = static_cast<int>(*period);
    p.mean = *v[0];
    p.sd = *v[1];
    p.lo95 = *v[2];
    p.hi95 = *v[3];
    out.push_back(p);
  }
  if (!issues.empty()) throw InputError(path.string(), issues);
  return out;
}

inline void save_ratios(const fs::path& path, const RatioDiagnostic& diag) {
  std::ostringstream os;
  os << "unit_id,year,period,estimate,prediction,ratio,flagged\n";
  for (const auto& e : diag.entries)
    os << detail::csv_field(e.unit_id) << ',' << e.year << ',' << e.period << ',' << format_double(e.estimate) << ','
       << format_double(e.prediction) << ',' << (e.flagged ? "" : format_double(e.ratio)) << ','
       << (e.flagged ? 1 : 0) << '\n';
  write_text(path, os.str());
}

inline void save_grid_table(const fs::path& path, const HoldoutSearchResult& result) {
  std::ostringstream os;
  os << "spatial_knots,spatial_radius_multiplier,temporal_radius,holdout_sse,predicted,selected,failure\n";
  for (std::size_t i = 0; i < result.table.size(); ++i) {
    const auto& row = result.table[i];
    os << row.point.spatial_knots << ',' << format_double(row.point.spatial_radius_multiplier) << ','
       << format_double(row.point.temporal_radius) << ',' << (row.ok() ? format_double(row.error) : "") << ','
       << row.predicted << ',' << (result.best && *result.best == i ? 1 : 0) << ','
       << detail::csv_field(row.failure) << '\n';
  }
  write_text(path, os.str());
}

/// Standalone SVG histogram of ratio values with a reference line at 1.
inline std::string histogram_svg(const std::vector<double>& values, const std::string& title, int bins = 30) {
  const double width = 640, height = 400, left = 60, right = 20, top = 40, bottom = 50;
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
     << title << "</text>\n";
  if (values.empty()) {
    os << "<text x=\"" << width / 2 << "\" y=\"" << height / 2
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\">no values</text>\n</svg>\n";
    return os.str();
  }
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  lo = std::min(lo, 1.0);
  hi = std::max(hi, 1.0);
  if (hi - lo < 1e-9) {
    lo -= 0.5;
    hi += 0.5;
  }
  std::vector<int> counts(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    auto b = static_cast<int>((v - lo) / (hi - lo) * bins);
    counts[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))]++;
  }
  int peak = *std::max_element(counts.begin(), counts.end());
  const double plot_w = width - left - right;
  const double plot_h = height - top - bottom;
  for (int b = 0; b < bins; ++b) {
    double h = plot_h * counts[static_cast<std::size_t>(b)] / std::max(peak, 1);
    os << "<rect x=\"" << left + plot_w * b / bins << "\" y=\"" << top + plot_h - h << "\" width=\""
       << plot_w / bins - 1 << "\" height=\"" << h << "\" fill=\"steelblue\"/>\n";
  }
  double x1 = left + plot_w * (1.0 - lo) / (hi - lo);
  os << "<line x1=\"" << x1 << "\" y1=\"" << top << "\" x2=\"" << x1 << "\" y2=\"" << top + plot_h
     << "\" stroke=\"firebrick\" stroke-dasharray=\"4 3\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w << "\" y2=\""
     << top + plot_h << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << left << "\" y=\"" << height - 20 << "\" font-family=\"sans-serif\" font-size=\"12\">" << lo
     << "</text>\n";
  os << "<text x=\"" << left + plot_w << "\" y=\"" << height - 20
     << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" << hi << "</text>\n";
  os << "<text x=\"" << left - 8 << "\" y=\"" << top + 10
     << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" << peak << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------------------
// Digests and manifest

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("SHA-256 computation failed");
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

/// Hash of a JSON value's canonical serialization (sorted keys, compact).
inline std::string canonical_hash(const json& value) { return sha256_hex(value.dump()); }

inline constexpr const char* version = "1.0.0";

struct RunManifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> input_digests;  // path -> SHA-256 hex
  std::string model_fingerprint;
  double seconds = 0.0;
  json extra = json::object();

  /// Changes iff a config field or an input digest changes.
  std::string config_hash() const {
    json keyed{{"config", config}, {"inputs", input_digests}};
    return canonical_hash(keyed);
  }

  json to_json() const {
    return {{"schema_version", 1},
            {"command", command},
            {"config_hash", config_hash()},
            {"config", config},
            {"seed", seed},
            {"inputs", input_digests},
            {"model_fingerprint", model_fingerprint},
            {"versions",
             {{"stcos", version},
              {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                            std::to_string(EIGEN_MINOR_VERSION)}}},
            {"timing", {{"seconds", seconds}}},
            {"details", extra}};
  }
};

}  // namespace stcos::io
