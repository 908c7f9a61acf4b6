#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "stcos/error.hpp"
#include "stcos/rng.hpp"

namespace stcos {

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(const Point& a, const Point& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

/// Closed ring: the first vertex is repeated as the last one.
using Ring = std::vector<Point>;

struct Polygon {
  Ring outer;
  std::vector<Ring> holes;
};

struct BoundingBox {
  double min_x = std::numeric_limits<double>::infinity();
  double min_y = std::numeric_limits<double>::infinity();
  double max_x = -std::numeric_limits<double>::infinity();
  double max_y = -std::numeric_limits<double>::infinity();

  void expand(const Point& p) {
    min_x = std::min(min_x, p.x);
    min_y = std::min(min_y, p.y);
    max_x = std::max(max_x, p.x);
    max_y = std::max(max_y, p.y);
  }
  double width() const { return max_x - min_x; }
  double height() const { return max_y - min_y; }
  double diagonal() const { return std::hypot(width(), height()); }
  bool overlaps(const BoundingBox& o, double tol = 0.0) const {
    return min_x <= o.max_x + tol && o.min_x <= max_x + tol && min_y <= o.max_y + tol &&
           o.min_y <= max_y + tol;
  }
  bool contains(const Point& p) const {
    return p.x >= min_x && p.x <= max_x && p.y >= min_y && p.y <= max_y;
  }
};

namespace detail {

/// Shoelace signed area; positive for counter-clockwise rings.
inline double signed_ring_area(const Ring& ring) {
  double twice = 0.0;
  for (std::size_t k = 0; k + 1 < ring.size(); ++k) {
    twice += ring[k].x * ring[k + 1].y - ring[k + 1].x * ring[k].y;
  }
  return 0.5 * twice;
}

inline bool ring_contains(const Ring& ring, const Point& p) {
  bool inside = false;
  for (std::size_t k = 0; k + 1 < ring.size(); ++k) {
    const Point& a = ring[k];
    const Point& b = ring[k + 1];
    if ((a.y > p.y) != (b.y > p.y)) {
      double x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (p.x < x_cross) inside = !inside;
    }
  }
  return inside;
}

inline bool on_segment(const Point& a, const Point& b, const Point& p, double tol) {
  double len = distance(a, b);
  double cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
  if (std::abs(cross) > tol * std::max(len, 1.0)) return false;
  double dot = (p.x - a.x) * (b.x - a.x) + (p.y - a.y) * (b.y - a.y);
  return dot >= -tol * len && dot <= len * len + tol * len;
}

inline void validate_ring(const Ring& ring, const std::string& what) {
  if (ring.size() < 4) throw GeometryError(what + ": ring needs at least 4 vertices (closed)");
  if (!(ring.front() == ring.back())) throw GeometryError(what + ": ring is not closed");
  for (const auto& p : ring) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
      throw GeometryError(what + ": non-finite coordinate");
  }
}

struct Triangle {
  std::array<Point, 3> v;  // counter-clockwise
  double sign;             // +1 or -1, orientation of the fan triangle it came from
  BoundingBox box;
};

using ConvexPoly = std::vector<Point>;

inline double convex_area(const ConvexPoly& poly) {
  if (poly.size() < 3) return 0.0;
  double twice = 0.0;
  for (std::size_t k = 0; k < poly.size(); ++k) {
    const Point& a = poly[k];
    const Point& b = poly[(k + 1) % poly.size()];
    twice += a.x * b.y - b.x * a.y;
  }
  return 0.5 * std::abs(twice);
}

/// Sutherland-Hodgman clip of `subject` against the counter-clockwise triangle `clip`.
inline double triangle_intersection_area(const Triangle& subject, const Triangle& clip) {
  ConvexPoly out(subject.v.begin(), subject.v.end());
  ConvexPoly in;
  for (int e = 0; e < 3 && !out.empty(); ++e) {
    const Point& a = clip.v[e];
    const Point& b = clip.v[(e + 1) % 3];
    auto side = [&](const Point& p) {
      return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    };
    in.swap(out);
    out.clear();
    for (std::size_t k = 0; k < in.size(); ++k) {
      const Point& p = in[k];
      const Point& q = in[(k + 1) % in.size()];
      double sp = side(p);
      double sq = side(q);
      if (sp >= 0.0) out.push_back(p);
      if ((sp >= 0.0) != (sq >= 0.0)) {
        double t = sp / (sp - sq);
        out.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
      }
    }
  }
  return convex_area(out);
}

}  // namespace detail

/// One areal unit: a (multi)polygon with an identifier, in planar projected coordinates.
///
/// Rings are normalized on construction (outer rings counter-clockwise, holes clockwise).
/// The fan triangulation used by the overlap computation is cached here.
class ArealUnit {
public:
  ArealUnit() = default;

  ArealUnit(std::string id, std::vector<Polygon> parts) : id_(std::move(id)), parts_(std::move(parts)) {
    if (parts_.empty()) throw GeometryError("unit '" + id_ + "': no polygons");
    for (auto& part : parts_) {
      detail::validate_ring(part.outer, "unit '" + id_ + "' outer ring");
      if (detail::signed_ring_area(part.outer) < 0.0) std::reverse(part.outer.begin(), part.outer.end());
      for (auto& hole : part.holes) {
        detail::validate_ring(hole, "unit '" + id_ + "' hole");
        if (detail::signed_ring_area(hole) > 0.0) std::reverse(hole.begin(), hole.end());
        for (const auto& p : hole) {
          if (!detail::ring_contains(part.outer, p) && !on_outer_boundary(part.outer, p))
            throw GeometryError("unit '" + id_ + "': hole vertex outside its outer ring");
        }
      }
    }
    area_ = 0.0;
    for (const auto& part : parts_) {
      area_ += detail::signed_ring_area(part.outer);
      for (const auto& hole : part.holes) area_ += detail::signed_ring_area(hole);
      for (const auto& p : part.outer) box_.expand(p);
    }
    build_fan();
  }

  const std::string& id() const { return id_; }
  const std::vector<Polygon>& parts() const { return parts_; }
  double area() const { return area_; }
  const BoundingBox& bounds() const { return box_; }

  bool contains(const Point& p) const {
    if (!box_.contains(p)) return false;
    for (const auto& part : parts_) {
      if (!detail::ring_contains(part.outer, p)) continue;
      bool in_hole = std::any_of(part.holes.begin(), part.holes.end(),
                                 [&](const Ring& h) { return detail::ring_contains(h, p); });
      if (!in_hole) return true;
    }
    return false;
  }

  /// Every ring, outer rings first within each part.
  std::vector<const Ring*> rings() const {
    std::vector<const Ring*> out;
    for (const auto& part : parts_) {
      out.push_back(&part.outer);
      for (const auto& hole : part.holes) out.push_back(&hole);
    }
    return out;
  }

  const std::vector<detail::Triangle>& fan() const { return fan_; }

  /// 64-bit digest over the exact coordinate bit patterns.
  std::uint64_t geometry_digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](double v) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      h = mix64(h ^ bits);
    };
    for (const Ring* ring : rings()) {
      feed(static_cast<double>(ring->size()));
      for (const auto& p : *ring) {
        feed(p.x);
        feed(p.y);
      }
    }
    return h;
  }

  bool same_geometry(const ArealUnit& other) const {
    auto a = rings();
    auto b = other.rings();
    if (a.size() != b.size()) return false;
    for (std::size_t k = 0; k < a.size(); ++k) {
      if (*a[k] != *b[k]) return false;
    }
    return true;
  }

private:
  static bool on_outer_boundary(const Ring& ring, const Point& p) {
    for (std::size_t k = 0; k + 1 < ring.size(); ++k) {
      if (detail::on_segment(ring[k], ring[k + 1], p, 1e-12)) return true;
    }
    return false;
  }

  // Signed fan triangles from one apex per unit: their signed indicators sum to the
  // unit's indicator function almost everywhere (holes carry the opposite orientation).
  void build_fan() {
    const Point apex = parts_.front().outer.front();
    for (const Ring* ring : rings()) {
      for (std::size_t k = 0; k + 1 < ring->size(); ++k) {
        detail::Triangle t{{apex, (*ring)[k], (*ring)[k + 1]}, 1.0, {}};
        double twice = (t.v[1].x - apex.x) * (t.v[2].y - apex.y) - (t.v[2].x - apex.x) * (t.v[1].y - apex.y);
        if (twice == 0.0) continue;
        if (twice < 0.0) {
          std::swap(t.v[1], t.v[2]);
          t.sign = -1.0;
        }
        for (const auto& v : t.v) t.box.expand(v);
        fan_.push_back(t);
      }
    }
  }

  std::string id_;
  std::vector<Polygon> parts_;
  double area_ = 0.0;
  BoundingBox box_;
  std::vector<detail::Triangle> fan_;
};

inline ArealUnit make_rectangle(std::string id, double x0, double y0, double x1, double y1) {
  Ring r{{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}, {x0, y0}};
  return ArealUnit(std::move(id), {Polygon{std::move(r), {}}});
}

/// Exact area of the intersection of two units.
inline double intersection_area(const ArealUnit& a, const ArealUnit& b) {
  if (!a.bounds().overlaps(b.bounds())) return 0.0;
  double total = 0.0;
  for (const auto& ta : a.fan()) {
    if (!ta.box.overlaps(b.bounds())) continue;
    for (const auto& tb : b.fan()) {
      if (!ta.box.overlaps(tb.box)) continue;
      total += ta.sign * tb.sign * detail::triangle_intersection_area(ta, tb);
    }
  }
  return std::max(total, 0.0);
}

/// Ordered collection of areal units with unique ids.
class SupportSet {
public:
  SupportSet() = default;

  /// With `disjoint = true` the pairwise intersection areas are checked against
  /// 1e-9 times the total area.
  SupportSet(std::vector<ArealUnit> units, bool disjoint) : units_(std::move(units)), disjoint_(disjoint) {
    for (std::size_t i = 0; i < units_.size(); ++i) {
      auto [it, inserted] = index_.emplace(units_[i].id(), i);
      if (!inserted) throw ConfigurationError("duplicate unit id '" + units_[i].id() + "'");
    }
    if (disjoint_) check_disjoint();
  }

  std::size_t size() const { return units_.size(); }
  bool empty() const { return units_.empty(); }
  bool disjoint() const { return disjoint_; }
  const ArealUnit& operator[](std::size_t i) const { return units_[i]; }
  const std::vector<ArealUnit>& units() const { return units_; }
  auto begin() const { return units_.begin(); }
  auto end() const { return units_.end(); }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  double total_area() const {
    double s = 0.0;
    for (const auto& u : units_) s += u.area();
    return s;
  }

  BoundingBox bounds() const {
    BoundingBox box;
    for (const auto& u : units_) {
      box.expand({u.bounds().min_x, u.bounds().min_y});
      box.expand({u.bounds().max_x, u.bounds().max_y});
    }
    return box;
  }

private:
  void check_disjoint() const {
    const double tol = 1e-9 * total_area();
    for (std::size_t i = 0; i < units_.size(); ++i) {
      for (std::size_t j = i + 1; j < units_.size(); ++j) {
        if (intersection_area(units_[i], units_[j]) > tol)
          throw GeometryError("units '" + units_[i].id() + "' and '" + units_[j].id() + "' overlap");
      }
    }
  }

  std::vector<ArealUnit> units_;
  bool disjoint_ = false;
  std::unordered_map<std::string, std::size_t> index_;
};

/// h(A): fraction of A's area falling in each fine unit.
inline Eigen::VectorXd overlap_fractions(const ArealUnit& target, const SupportSet& fine) {
  if (!fine.disjoint()) throw ConfigurationError("overlap_fractions requires a disjoint fine support set");
  if (!(target.area() > 0.0)) throw DomainError("unit '" + target.id() + "' has zero area");
  Eigen::VectorXd h(fine.size());
  for (std::size_t i = 0; i < fine.size(); ++i) {
    h[static_cast<Eigen::Index>(i)] = std::clamp(intersection_area(target, fine[i]) / target.area(), 0.0, 1.0);
  }
  return h;
}

/// `count` i.i.d. uniform points on the unit, by rejection from its bounding box.
inline std::vector<Point> uniform_sample(const ArealUnit& unit, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ConfigurationError("uniform_sample needs at least one point");
  if (!(unit.area() > 0.0)) throw DomainError("unit '" + unit.id() + "' has zero area");
  const BoundingBox& box = unit.bounds();
  if (!(box.width() > 0.0) || !(box.height() > 0.0))
    throw GeometryError("unit '" + unit.id() + "' has a degenerate bounding box");

  Rng rng(seed);
  std::vector<Point> points;
  points.reserve(count);
  const double acceptance = unit.area() / (box.width() * box.height());
  const std::size_t max_draws = static_cast<std::size_t>(std::ceil(count * 50.0 / acceptance)) + 10000;
  std::size_t draws = 0;
  while (points.size() < count) {
    if (++draws > max_draws) throw GeometryError("rejection sampling failed on unit '" + unit.id() + "'");
    Point p{box.min_x + uniform01(rng) * box.width(), box.min_y + uniform01(rng) * box.height()};
    if (unit.contains(p)) points.push_back(p);
  }
  return points;
}

/// Binary, symmetric, zero-diagonal neighbourhood structure on the fine set.
class AdjacencyMatrix {
public:
  AdjacencyMatrix() = default;
  explicit AdjacencyMatrix(std::size_t n) : m_(Eigen::MatrixXd::Zero(n, n)) {}

  std::size_t size() const { return static_cast<std::size_t>(m_.rows()); }
  const Eigen::MatrixXd& matrix() const { return m_; }

  void connect(std::size_t i, std::size_t j) {
    if (i >= size() || j >= size()) throw ConfigurationError("adjacency index out of range");
    if (i == j) throw ConfigurationError("self-adjacency is not allowed");
    m_(i, j) = 1.0;
    m_(j, i) = 1.0;
  }
  bool adjacent(std::size_t i, std::size_t j) const { return m_(i, j) != 0.0; }
  Eigen::Index degree(std::size_t i) const { return static_cast<Eigen::Index>(m_.row(i).sum()); }

private:
  Eigen::MatrixXd m_;
};

namespace detail {

inline bool share_segment(const Point& a0, const Point& a1, const Point& b0, const Point& b1, double tol) {
  const double len = distance(a0, a1);
  if (len <= tol) return false;
  const double ux = (a1.x - a0.x) / len;
  const double uy = (a1.y - a0.y) / len;
  auto offset = [&](const Point& p) { return ux * (p.y - a0.y) - uy * (p.x - a0.x); };
  if (std::abs(offset(b0)) > tol || std::abs(offset(b1)) > tol) return false;
  auto along = [&](const Point& p) { return ux * (p.x - a0.x) + uy * (p.y - a0.y); };
  double lo = std::max(0.0, std::min(along(b0), along(b1)));
  double hi = std::min(len, std::max(along(b0), along(b1)));
  return hi - lo > tol;
}

}  // namespace detail

/// Rook adjacency: units are neighbours when their boundaries share a segment of positive length.
inline AdjacencyMatrix build_adjacency(const SupportSet& fine) {
  if (!fine.disjoint()) throw ConfigurationError("build_adjacency requires a disjoint fine support set");
  AdjacencyMatrix adj(fine.size());
  const double tol = 1e-9 * std::max(fine.bounds().diagonal(), 1e-300);
  for (std::size_t i = 0; i < fine.size(); ++i) {
    for (std::size_t j = i + 1; j < fine.size(); ++j) {
      if (!fine[i].bounds().overlaps(fine[j].bounds(), tol)) continue;
      bool found = false;
      for (const Ring* ri : fine[i].rings()) {
        for (std::size_t a = 0; a + 1 < ri->size() && !found; ++a) {
          for (const Ring* rj : fine[j].rings()) {
            for (std::size_t b = 0; b + 1 < rj->size() && !found; ++b) {
              found = detail::share_segment((*ri)[a], (*ri)[a + 1], (*rj)[b], (*rj)[b + 1], tol);
            }
          }
        }
        if (found) break;
      }
      if (found) adj.connect(i, j);
    }
  }
  return adj;
}

/// Adjacency from an explicit edge list, bypassing geometric detection.
inline AdjacencyMatrix adjacency_from_edges(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
  AdjacencyMatrix adj(n);
  for (auto [i, j] : edges) adj.connect(i, j);
  return adj;
}

/// Spatial and temporal knot locations of the bisquare basis.
struct KnotSet {
  std::vector<Point> spatial;
  std::vector<double> temporal;

  std::size_t spatial_count() const { return spatial.size(); }
  std::size_t temporal_count() const { return temporal.size(); }

  void validate() const {
    if (spatial.empty() || temporal.empty()) throw ConfigurationError("knot set needs spatial and temporal knots");
    for (std::size_t a = 0; a < spatial.size(); ++a)
      for (std::size_t b = a + 1; b < spatial.size(); ++b)
        if (spatial[a] == spatial[b]) throw ConfigurationError("duplicate spatial knot");
    for (std::size_t k = 1; k < temporal.size(); ++k)
      if (!(temporal[k] > temporal[k - 1])) throw ConfigurationError("temporal knots must be strictly increasing");
  }
};

inline double min_pairwise_distance(const std::vector<Point>& pts) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < pts.size(); ++a)
    for (std::size_t b = a + 1; b < pts.size(); ++b) best = std::min(best, distance(pts[a], pts[b]));
  return best;
}

/// Points drawn uniformly over the union of the units (unit chosen by area, then rejection within it).
inline std::vector<Point> sample_union(const SupportSet& domain, std::size_t count, std::uint64_t seed) {
  if (domain.empty()) throw ConfigurationError("empty domain");
  std::vector<double> cumulative;
  double acc = 0.0;
  for (const auto& u : domain) cumulative.push_back(acc += u.area());
  if (!(acc > 0.0)) throw DomainError("domain has zero area");

  Rng rng(derive_seed(seed, 0x5a3f));
  std::vector<Point> points;
  points.reserve(count);
  for (std::size_t q = 0; q < count; ++q) {
    double u = uniform01(rng) * acc;
    auto idx = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
    idx = std::min(idx, domain.size() - 1);
    points.push_back(uniform_sample(domain[idx], 1, derive_seed(seed, q, 0x77))[0]);
  }
  return points;
}

/// Largest distance from any candidate to its nearest design point.
inline double coverage_radius(const std::vector<Point>& candidates, const std::vector<Point>& design) {
  double worst = 0.0;
  for (const auto& c : candidates) {
    double nearest = std::numeric_limits<double>::infinity();
    for (const auto& d : design) nearest = std::min(nearest, distance(c, d));
    worst = std::max(worst, nearest);
  }
  return worst;
}

/// Space-filling selection of `count` knots from `candidates` uniform points over the domain.
///
/// Greedy farthest-point initialization from a seeded start, then k-centroid exchange:
/// each knot is replaced by the candidate closest to the centroid of the candidates it
/// covers, until the assignment is stable. Knots are always members of the candidate set,
/// hence inside the domain.
inline std::vector<Point> space_filling_knots(const SupportSet& domain, std::size_t count, std::size_t candidates,
                                              std::uint64_t seed, int max_sweeps = 200) {
  if (count == 0) throw ConfigurationError("need at least one spatial knot");
  if (count > candidates) throw ConfigurationError("more knots requested than candidate points");
  std::vector<Point> cand = sample_union(domain, candidates, seed);
  if (count == candidates) return cand;

  const std::size_t n = cand.size();
  std::vector<std::size_t> chosen;
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  Rng rng(derive_seed(seed, 0x1717));
  chosen.push_back(static_cast<std::size_t>(rng() % n));
  while (chosen.size() < count) {
    const Point& last = cand[chosen.back()];
    std::size_t far = 0;
    for (std::size_t q = 0; q < n; ++q) {
      nearest[q] = std::min(nearest[q], distance(cand[q], last));
      if (nearest[q] > nearest[far]) far = q;
    }
    chosen.push_back(far);
  }

  std::vector<std::size_t> owner(n, 0);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    for (std::size_t q = 0; q < n; ++q) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < count; ++k) {
        double d = distance(cand[q], cand[chosen[k]]);
        if (d < best) {
          best = d;
          owner[q] = k;
        }
      }
    }
    std::vector<Point> centroid(count, Point{0.0, 0.0});
    std::vector<std::size_t> members(count, 0);
    for (std::size_t q = 0; q < n; ++q) {
      centroid[owner[q]].x += cand[q].x;
      centroid[owner[q]].y += cand[q].y;
      ++members[owner[q]];
    }
    bool changed = false;
    for (std::size_t k = 0; k < count; ++k) {
      if (members[k] == 0) continue;
      Point c{centroid[k].x / members[k], centroid[k].y / members[k]};
      std::size_t best_q = chosen[k];
      double best = distance(cand[best_q], c);
      for (std::size_t q = 0; q < n; ++q) {
        if (owner[q] != k) continue;
        double d = distance(cand[q], c);
        if (d < best) {
          best = d;
          best_q = q;
        }
      }
      if (best_q != chosen[k]) {
        chosen[k] = best_q;
        changed = true;
      }
    }
    if (!changed) break;
  }

  std::vector<Point> knots;
  for (auto q : chosen) knots.push_back(cand[q]);
  return knots;
}

}  // namespace stcos
