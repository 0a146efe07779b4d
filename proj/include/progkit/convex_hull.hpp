// Incremental 3D convex hull on integer lattice points.
//
// Voxel centres live on the integer index lattice, so every orientation test
// is evaluated exactly in 64-bit integers (coordinates up to ~10^5 are safe).
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "progkit/core.hpp"

namespace progkit::hull {

using IPoint = std::array<std::int64_t, 3>;

/// Plane n . p <= d bounding the hull from outside.
struct HalfSpace {
  IPoint normal;
  std::int64_t offset;
};

struct Hull {
  /// 0 = single point, 1 = segment, 2 = planar polygon, 3 = solid polytope.
  int dimension = 0;
  std::vector<IPoint> vertices;
  /// Outward bounding planes. For a planar hull these are the two sides of
  /// its plane plus one plane per edge; empty below dimension 2.
  std::vector<HalfSpace> facets;

  bool contains(const IPoint& p) const {
    for (const HalfSpace& h : facets)
      if (h.normal[0] * p[0] + h.normal[1] * p[1] + h.normal[2] * p[2] > h.offset) return false;
    return true;
  }
};

namespace detail {

inline IPoint sub(const IPoint& a, const IPoint& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline IPoint cross(const IPoint& a, const IPoint& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline std::int64_t dot(const IPoint& a, const IPoint& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline bool is_zero(const IPoint& a) { return a[0] == 0 && a[1] == 0 && a[2] == 0; }

// Monotone-chain 2D hull of points in a plane, projected by dropping the axis
// with the largest normal component. Collinear boundary points are dropped.
inline std::vector<IPoint> planar_hull(std::vector<IPoint> pts, const IPoint& normal) {
  int drop = 0;
  for (int a = 1; a < 3; ++a)
    if (std::abs(normal[a]) > std::abs(normal[drop])) drop = a;
  const int u = drop == 0 ? 1 : 0;
  const int v = drop == 2 ? 1 : 2;
  std::sort(pts.begin(), pts.end(), [&](const IPoint& a, const IPoint& b) {
    return a[u] != b[u] ? a[u] < b[u] : a[v] < b[v];
  });
  auto turn = [&](const IPoint& o, const IPoint& a, const IPoint& b) {
    return (a[u] - o[u]) * (b[v] - o[v]) - (a[v] - o[v]) * (b[u] - o[u]);
  };
  std::vector<IPoint> h(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && turn(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && turn(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  h.resize(k > 1 ? k - 1 : k);
  return h;
}

struct Face {
  std::array<std::uint32_t, 3> v;
  IPoint normal;
  std::int64_t offset;
  bool alive = true;
};

inline std::uint64_t edge_key(std::uint32_t a, std::uint32_t b) { return (static_cast<std::uint64_t>(a) << 32) | b; }

}  // namespace detail

/// Convex hull of a point set. Duplicates are removed first.
inline Hull convex_hull(std::vector<IPoint> pts) {
  using namespace detail;
  if (pts.empty()) throw ArgumentError("convex_hull: empty point set");
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());

  Hull out;
  if (pts.size() == 1) {
    out.vertices = pts;
    return out;
  }
  // Initial simplex: lexicographic extremes are always distinct hull points.
  const std::size_t i0 = 0, i1 = pts.size() - 1;
  const IPoint dir = sub(pts[i1], pts[i0]);
  std::size_t i2 = pts.size();
  IPoint best_n{0, 0, 0};
  std::int64_t best_len = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const IPoint n = cross(dir, sub(pts[i], pts[i0]));
    const std::int64_t len = dot(n, n);
    if (len > best_len) {
      best_len = len;
      best_n = n;
      i2 = i;
    }
  }
  if (i2 == pts.size()) {
    out.dimension = 1;
    out.vertices = {pts[i0], pts[i1]};
    return out;
  }
  std::size_t i3 = pts.size();
  std::int64_t best_h = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const std::int64_t h = std::abs(dot(best_n, sub(pts[i], pts[i0])));
    if (h > best_h) {
      best_h = h;
      i3 = i;
    }
  }
  if (i3 == pts.size()) {
    out.dimension = 2;
    out.vertices = planar_hull(pts, best_n);
    const std::int64_t d = dot(best_n, pts[i0]);
    out.facets.push_back({best_n, d});
    out.facets.push_back({{-best_n[0], -best_n[1], -best_n[2]}, -d});
    const std::size_t m = out.vertices.size();
    for (std::size_t i = 0; i < m; ++i) {
      const IPoint& a = out.vertices[i];
      const IPoint& b = out.vertices[(i + 1) % m];
      const IPoint& c = out.vertices[(i + 2) % m];
      IPoint n = cross(sub(b, a), best_n);
      if (dot(n, sub(c, a)) > 0) n = {-n[0], -n[1], -n[2]};
      out.facets.push_back({n, dot(n, a)});
    }
    return out;
  }

  out.dimension = 3;
  std::vector<Face> faces;
  std::unordered_map<std::uint64_t, std::uint32_t> edge_owner;
  edge_owner.reserve(pts.size() * 8);

  auto add_face = [&](std::uint32_t a, std::uint32_t b, std::uint32_t c) {
    Face f;
    f.v = {a, b, c};
    f.normal = cross(sub(pts[b], pts[a]), sub(pts[c], pts[a]));
    f.offset = dot(f.normal, pts[a]);
    const auto id = static_cast<std::uint32_t>(faces.size());
    faces.push_back(f);
    edge_owner[edge_key(a, b)] = id;
    edge_owner[edge_key(b, c)] = id;
    edge_owner[edge_key(c, a)] = id;
  };

  auto a = static_cast<std::uint32_t>(i0), b = static_cast<std::uint32_t>(i1), c = static_cast<std::uint32_t>(i2),
       d = static_cast<std::uint32_t>(i3);
  // Orient so that d lies below face (a, b, c).
  if (dot(cross(sub(pts[b], pts[a]), sub(pts[c], pts[a])), sub(pts[d], pts[a])) > 0) std::swap(b, c);
  add_face(a, b, c);
  add_face(a, d, b);
  add_face(b, d, c);
  add_face(c, d, a);

  std::size_t dead = 0;
  std::vector<std::uint32_t> visible;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> horizon;
  // Randomized insertion order keeps the expected face churn low; the fixed
  // seed keeps the result deterministic.
  std::vector<std::size_t> order;
  order.reserve(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (i != i0 && i != i1 && i != i2 && i != i3) order.push_back(i);
  Rng(0x9e3779b97f4a7c15ULL).shuffle(order);
  for (std::size_t pi : order) {
    const IPoint& p = pts[pi];
    visible.clear();
    for (std::uint32_t f = 0; f < faces.size(); ++f)
      if (faces[f].alive && dot(faces[f].normal, p) > faces[f].offset) visible.push_back(f);
    if (visible.empty()) continue;
    for (std::uint32_t f : visible) faces[f].alive = false;
    horizon.clear();
    for (std::uint32_t f : visible) {
      const auto& v = faces[f].v;
      for (int e = 0; e < 3; ++e) {
        const std::uint32_t u = v[e], w = v[(e + 1) % 3];
        const auto it = edge_owner.find(edge_key(w, u));
        if (it != edge_owner.end() && faces[it->second].alive) horizon.emplace_back(u, w);
      }
    }
    for (std::uint32_t f : visible) {
      const auto& v = faces[f].v;
      for (int e = 0; e < 3; ++e) edge_owner.erase(edge_key(v[e], v[(e + 1) % 3]));
    }
    const auto np = static_cast<std::uint32_t>(pi);
    for (const auto& [u, w] : horizon) add_face(u, w, np);

    dead += visible.size();
    if (dead > 2 * (faces.size() - dead) + 64) {
      std::vector<Face> alive;
      alive.reserve(faces.size() - dead);
      for (const Face& f : faces)
        if (f.alive) alive.push_back(f);
      faces.clear();
      edge_owner.clear();
      for (const Face& f : alive) add_face(f.v[0], f.v[1], f.v[2]);
      dead = 0;
    }
  }

  std::vector<char> used(pts.size(), 0);
  for (const Face& f : faces) {
    if (!f.alive) continue;
    out.facets.push_back({f.normal, f.offset});
    for (auto v : f.v) used[v] = 1;
  }
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (used[i]) out.vertices.push_back(pts[i]);
  return out;
}

}  // namespace progkit::hull
