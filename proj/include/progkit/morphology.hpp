// Connected components and per-tumour shape/intensity descriptors.
//
// Foreground connectivity defaults to 26 with 6-connected background. Area
// features are voxel counts; lengths are in millimetres using the grid
// spacing.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "progkit/convex_hull.hpp"
#include "progkit/core.hpp"
#include "progkit/volume.hpp"

namespace progkit {

enum class Connectivity { Six = 6, TwentySix = 26 };

struct LabelMap {
  Dims dims;
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};
  std::vector<std::int32_t> labels;
  int count = 0;

  std::int32_t at(std::size_t z, std::size_t y, std::size_t x) const { return labels[(z * dims.y + y) * dims.x + x]; }
};

using Voxel = std::array<long, 3>;

namespace detail {

inline std::vector<Voxel> neighbour_offsets(Connectivity c) {
  std::vector<Voxel> out;
  for (long dz = -1; dz <= 1; ++dz)
    for (long dy = -1; dy <= 1; ++dy)
      for (long dx = -1; dx <= 1; ++dx) {
        const long m = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (m == 0) continue;
        if (c == Connectivity::Six && m != 1) continue;
        out.push_back({dz, dy, dx});
      }
  return out;
}

inline bool in_grid(const Dims& d, long z, long y, long x) {
  return z >= 0 && y >= 0 && x >= 0 && z < static_cast<long>(d.z) && y < static_cast<long>(d.y) &&
         x < static_cast<long>(d.x);
}

// Flood-fill labelling; labels follow the raster order of each component's
// first voxel.
inline std::vector<std::int32_t> label_grid(const std::vector<std::uint8_t>& fg, const Dims& d, Connectivity c,
                                            int& count) {
  std::vector<std::int32_t> lab(fg.size(), 0);
  const auto offs = neighbour_offsets(c);
  std::vector<Voxel> stack;
  count = 0;
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x) {
        const std::size_t i = (z * d.y + y) * d.x + x;
        if (!fg[i] || lab[i]) continue;
        ++count;
        lab[i] = count;
        stack.assign(1, {static_cast<long>(z), static_cast<long>(y), static_cast<long>(x)});
        while (!stack.empty()) {
          const Voxel v = stack.back();
          stack.pop_back();
          for (const Voxel& o : offs) {
            const long nz = v[0] + o[0], ny = v[1] + o[1], nx = v[2] + o[2];
            if (!in_grid(d, nz, ny, nx)) continue;
            const std::size_t j = (static_cast<std::size_t>(nz) * d.y + static_cast<std::size_t>(ny)) * d.x +
                                  static_cast<std::size_t>(nx);
            if (fg[j] && !lab[j]) {
              lab[j] = count;
              stack.push_back({nz, ny, nx});
            }
          }
        }
      }
  return lab;
}

inline std::vector<std::uint8_t> foreground(const Volume& mask) {
  std::vector<std::uint8_t> fg(mask.size());
  auto d = mask.data();
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = d[i] > 0.0f ? 1 : 0;
  return fg;
}

// Euler characteristic V - E + F - C of the union of closed unit cubes.
inline long euler_grid(const std::vector<std::uint8_t>& fg, const Dims& d) {
  const long Z = static_cast<long>(d.z), Y = static_cast<long>(d.y), X = static_cast<long>(d.x);
  auto on = [&](long z, long y, long x) -> bool {
    if (z < 0 || y < 0 || x < 0 || z >= Z || y >= Y || x >= X) return false;
    return fg[(static_cast<std::size_t>(z) * d.y + static_cast<std::size_t>(y)) * d.x + static_cast<std::size_t>(x)];
  };
  long V = 0, E = 0, F = 0, C = 0;
  for (long z = 0; z <= Z; ++z)
    for (long y = 0; y <= Y; ++y)
      for (long x = 0; x <= X; ++x) {
        // Lattice point (z, y, x) is the min corner of voxel (z, y, x).
        bool v = false;
        for (long a = 0; a < 2 && !v; ++a)
          for (long b = 0; b < 2 && !v; ++b)
            for (long c = 0; c < 2 && !v; ++c) v = on(z - a, y - b, x - c);
        V += v;
        // Edges leaving this lattice point along +x, +y, +z.
        if (x < X) E += on(z, y, x) || on(z - 1, y, x) || on(z, y - 1, x) || on(z - 1, y - 1, x);
        if (y < Y) E += on(z, y, x) || on(z - 1, y, x) || on(z, y, x - 1) || on(z - 1, y, x - 1);
        if (z < Z) E += on(z, y, x) || on(z, y - 1, x) || on(z, y, x - 1) || on(z, y - 1, x - 1);
        // Faces with this min corner, normal along z, y, x.
        if (y < Y && x < X) F += on(z, y, x) || on(z - 1, y, x);
        if (z < Z && x < X) F += on(z, y, x) || on(z, y - 1, x);
        if (z < Z && y < Y) F += on(z, y, x) || on(z, y, x - 1);
        if (z < Z && y < Y && x < X) C += on(z, y, x);
      }
  return V - E + F - C;
}

inline std::vector<std::uint8_t> fill_grid(const std::vector<std::uint8_t>& fg, const Dims& d) {
  // Background reachable from the border with 6-connectivity stays background.
  std::vector<std::uint8_t> outside(fg.size(), 0);
  std::vector<Voxel> stack;
  auto seed = [&](long z, long y, long x) {
    const std::size_t i = (static_cast<std::size_t>(z) * d.y + static_cast<std::size_t>(y)) * d.x + static_cast<std::size_t>(x);
    if (!fg[i] && !outside[i]) {
      outside[i] = 1;
      stack.push_back({z, y, x});
    }
  };
  const long Z = static_cast<long>(d.z), Y = static_cast<long>(d.y), X = static_cast<long>(d.x);
  for (long z = 0; z < Z; ++z)
    for (long y = 0; y < Y; ++y)
      for (long x = 0; x < X; ++x)
        if (z == 0 || y == 0 || x == 0 || z == Z - 1 || y == Y - 1 || x == X - 1) seed(z, y, x);
  const auto offs = neighbour_offsets(Connectivity::Six);
  while (!stack.empty()) {
    const Voxel v = stack.back();
    stack.pop_back();
    for (const Voxel& o : offs) {
      const long nz = v[0] + o[0], ny = v[1] + o[1], nx = v[2] + o[2];
      if (in_grid(d, nz, ny, nx)) seed(nz, ny, nx);
    }
  }
  std::vector<std::uint8_t> filled(fg.size());
  for (std::size_t i = 0; i < fg.size(); ++i) filled[i] = outside[i] ? 0 : 1;
  return filled;
}

}  // namespace detail

inline LabelMap connected_components(const Volume& mask, Connectivity c = Connectivity::TwentySix) {
  if (!mask.is_label_map()) throw ArgumentError("connected_components: mask must hold non-negative integers");
  LabelMap lm;
  lm.dims = mask.dims();
  lm.spacing = mask.spacing();
  lm.origin = mask.origin();
  lm.labels = detail::label_grid(detail::foreground(mask), mask.dims(), c, lm.count);
  return lm;
}

inline long euler_number(const Volume& mask) { return detail::euler_grid(detail::foreground(mask), mask.dims()); }

inline Volume fill_holes(const Volume& mask) {
  const auto filled = detail::fill_grid(detail::foreground(mask), mask.dims());
  Volume out(mask.dims(), mask.spacing(), mask.origin(), Modality::Mask);
  auto o = out.data();
  for (std::size_t i = 0; i < filled.size(); ++i) o[i] = filled[i];
  return out;
}

struct HullMask {
  Volume mask;
  std::vector<Vec3> vertices_mm;
  int dimension = 0;
  std::size_t voxel_count = 0;
};

namespace detail {

// Keeps only the x-extremes of every (z, y) row; their hull equals the hull
// of the full set.
inline std::vector<hull::IPoint> row_extremes(const std::vector<Voxel>& voxels) {
  std::vector<hull::IPoint> pts;
  std::vector<Voxel> sorted = voxels;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j][0] == sorted[i][0] && sorted[j][1] == sorted[i][1]) ++j;
    pts.push_back({sorted[i][0], sorted[i][1], sorted[i][2]});
    if (j - 1 != i) pts.push_back({sorted[j - 1][0], sorted[j - 1][1], sorted[j - 1][2]});
    i = j;
  }
  return pts;
}

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

struct HullVoxels {
  hull::Hull hull;
  std::vector<Voxel> voxels;  // voxels whose centres are inside or on the hull
};

// Voxelizes the hull of `voxels` on the index lattice, clipped to `d`.
inline HullVoxels hull_voxels(const std::vector<Voxel>& voxels, const Dims& d) {
  HullVoxels out;
  out.hull = hull::convex_hull(row_extremes(voxels));
  if (out.hull.dimension == 0) {
    out.voxels = {voxels.front()};
    return out;
  }
  if (out.hull.dimension == 1) {
    const auto& a = out.hull.vertices[0];
    const auto& b = out.hull.vertices[1];
    const std::int64_t g = std::gcd(std::gcd(std::abs(b[0] - a[0]), std::abs(b[1] - a[1])), std::abs(b[2] - a[2]));
    for (std::int64_t t = 0; t <= g; ++t) {
      const Voxel p{static_cast<long>(a[0] + (b[0] - a[0]) / g * t), static_cast<long>(a[1] + (b[1] - a[1]) / g * t),
                    static_cast<long>(a[2] + (b[2] - a[2]) / g * t)};
      if (in_grid(d, p[0], p[1], p[2])) out.voxels.push_back(p);
    }
    std::sort(out.voxels.begin(), out.voxels.end());
    return out;
  }
  Voxel lo{LONG_MAX, LONG_MAX, LONG_MAX}, hi{LONG_MIN, LONG_MIN, LONG_MIN};
  for (const auto& v : out.hull.vertices)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min<long>(lo[a], v[a]);
      hi[a] = std::max<long>(hi[a], v[a]);
    }
  for (long z = std::max(0L, lo[0]); z <= std::min<long>(hi[0], static_cast<long>(d.z) - 1); ++z)
    for (long y = std::max(0L, lo[1]); y <= std::min<long>(hi[1], static_cast<long>(d.y) - 1); ++y) {
      std::int64_t xmin = std::max(0L, lo[2]), xmax = std::min<long>(hi[2], static_cast<long>(d.x) - 1);
      for (const auto& h : out.hull.facets) {
        const std::int64_t rhs = h.offset - h.normal[0] * z - h.normal[1] * y;
        const std::int64_t nx = h.normal[2];
        if (nx > 0) xmax = std::min(xmax, floor_div(rhs, nx));
        else if (nx < 0) xmin = std::max(xmin, -floor_div(rhs, -nx));
        else if (rhs < 0) xmax = xmin - 1;
        if (xmax < xmin) break;
      }
      for (std::int64_t x = xmin; x <= xmax; ++x) out.voxels.push_back({z, y, static_cast<long>(x)});
    }
  return out;
}

}  // namespace detail

/// Voxelized convex hull of the foreground of `region` (voxel kept when its
/// centre lies inside or on the hull). Planar and collinear regions get the
/// lattice points of their polygon or segment.
inline HullMask convex_hull_mask(const Volume& region) {
  std::vector<Voxel> voxels;
  const Dims& d = region.dims();
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x)
        if (region.at(z, y, x) > 0.0f) voxels.push_back({static_cast<long>(z), static_cast<long>(y), static_cast<long>(x)});
  if (voxels.empty()) throw ArgumentError("convex_hull_mask: empty region");
  const auto hv = detail::hull_voxels(voxels, d);
  HullMask out{Volume(d, region.spacing(), region.origin(), Modality::Mask), {}, hv.hull.dimension, hv.voxels.size()};
  for (const auto& v : hv.voxels) out.mask.at(v[0], v[1], v[2]) = 1.0f;
  for (const auto& v : hv.hull.vertices)
    out.vertices_mm.push_back(region.position(static_cast<double>(v[0]), static_cast<double>(v[1]), static_cast<double>(v[2])));
  return out;
}

struct RegionFeatures {
  Vec3 centroid_mm{};
  std::array<double, 6> bbox_mm{};  // min z, y, x then max z, y, x (voxel centres)
  long euler_number = 0;
  double extent = 0.0;
  double solidity = 0.0;
  long filled_area_vox = 0;
  long convex_area_vox = 0;
  long bbox_area_vox = 0;
  double max_feret_mm = 0.0;
  double equiv_diameter_mm = 0.0;
  Vec3 inertia_eigvals{};
  double ct_min = 0.0, ct_mean = 0.0, ct_max = 0.0;
  double pet_min = 0.0, pet_mean = 0.0, pet_max = 0.0;

  static constexpr std::size_t kSize = 26;

  static const std::vector<std::string>& names() {
    static const std::vector<std::string> n = {
        "centroid_z_mm", "centroid_y_mm", "centroid_x_mm", "bbox_min_z_mm", "bbox_min_y_mm", "bbox_min_x_mm",
        "bbox_max_z_mm", "bbox_max_y_mm", "bbox_max_x_mm", "euler_number", "extent", "solidity",
        "filled_area_vox", "convex_area_vox", "bbox_area_vox", "max_feret_mm", "equiv_diameter_mm",
        "inertia_eig_0", "inertia_eig_1", "inertia_eig_2", "ct_min", "ct_mean", "ct_max",
        "pet_min", "pet_mean", "pet_max"};
    return n;
  }

  std::vector<double> to_vector() const {
    std::vector<double> v;
    v.reserve(kSize);
    v.insert(v.end(), centroid_mm.begin(), centroid_mm.end());
    v.insert(v.end(), bbox_mm.begin(), bbox_mm.end());
    v.push_back(static_cast<double>(euler_number));
    v.push_back(extent);
    v.push_back(solidity);
    v.push_back(static_cast<double>(filled_area_vox));
    v.push_back(static_cast<double>(convex_area_vox));
    v.push_back(static_cast<double>(bbox_area_vox));
    v.push_back(max_feret_mm);
    v.push_back(equiv_diameter_mm);
    v.insert(v.end(), inertia_eigvals.begin(), inertia_eigvals.end());
    for (double x : {ct_min, ct_mean, ct_max, pet_min, pet_mean, pet_max}) v.push_back(x);
    return v;
  }

  static RegionFeatures from_vector(const std::vector<double>& v) {
    if (v.size() != kSize) throw ArgumentError("RegionFeatures: expected 26 values");
    RegionFeatures f;
    std::copy_n(v.begin(), 3, f.centroid_mm.begin());
    std::copy_n(v.begin() + 3, 6, f.bbox_mm.begin());
    f.euler_number = std::lround(v[9]);
    f.extent = v[10];
    f.solidity = v[11];
    f.filled_area_vox = std::lround(v[12]);
    f.convex_area_vox = std::lround(v[13]);
    f.bbox_area_vox = std::lround(v[14]);
    f.max_feret_mm = v[15];
    f.equiv_diameter_mm = v[16];
    std::copy_n(v.begin() + 17, 3, f.inertia_eigvals.begin());
    f.ct_min = v[20];
    f.ct_mean = v[21];
    f.ct_max = v[22];
    f.pet_min = v[23];
    f.pet_mean = v[24];
    f.pet_max = v[25];
    return f;
  }
};

namespace detail {

inline RegionFeatures describe(const std::vector<Voxel>& voxels, const Dims& grid, const Vec3& spacing,
                               const Vec3& origin, const Volume* ct, const Volume* pet) {
  RegionFeatures f;
  const auto n = static_cast<std::int64_t>(voxels.size());

  // Integer moments keep shape features exactly translation invariant.
  std::array<std::int64_t, 3> s1{0, 0, 0};
  std::array<std::array<__int128, 3>, 3> s2{};
  Voxel lo{LONG_MAX, LONG_MAX, LONG_MAX}, hi{LONG_MIN, LONG_MIN, LONG_MIN};
  for (const Voxel& v : voxels) {
    for (int a = 0; a < 3; ++a) {
      s1[a] += v[a];
      lo[a] = std::min(lo[a], v[a]);
      hi[a] = std::max(hi[a], v[a]);
      for (int b = 0; b < 3; ++b) s2[a][b] += static_cast<__int128>(v[a]) * v[b];
    }
  }
  for (int a = 0; a < 3; ++a) {
    f.centroid_mm[a] = origin[a] + spacing[a] * (static_cast<double>(s1[a]) / static_cast<double>(n));
    f.bbox_mm[a] = origin[a] + spacing[a] * static_cast<double>(lo[a]);
    f.bbox_mm[3 + a] = origin[a] + spacing[a] * static_cast<double>(hi[a]);
  }
  Eigen::Matrix3d cov;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      const __int128 num = static_cast<__int128>(n) * s2[a][b] - static_cast<__int128>(s1[a]) * s1[b];
      cov(a, b) = static_cast<double>(num) / (static_cast<double>(n) * static_cast<double>(n)) * spacing[a] * spacing[b];
    }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov, Eigen::EigenvaluesOnly);
  Eigen::Vector3d ev = es.eigenvalues();
  for (int a = 0; a < 3; ++a) f.inertia_eigvals[a] = std::max(0.0, ev(2 - a));

  // Sub-grid around the region with a one-voxel margin for topology features.
  const Dims sub{static_cast<std::size_t>(hi[0] - lo[0] + 3), static_cast<std::size_t>(hi[1] - lo[1] + 3),
                 static_cast<std::size_t>(hi[2] - lo[2] + 3)};
  std::vector<std::uint8_t> fg(sub.count(), 0);
  for (const Voxel& v : voxels)
    fg[(static_cast<std::size_t>(v[0] - lo[0] + 1) * sub.y + static_cast<std::size_t>(v[1] - lo[1] + 1)) * sub.x +
       static_cast<std::size_t>(v[2] - lo[2] + 1)] = 1;
  f.euler_number = euler_grid(fg, sub);
  const auto filled = fill_grid(fg, sub);
  f.filled_area_vox = static_cast<long>(std::count(filled.begin(), filled.end(), 1));

  std::vector<Voxel> local;
  local.reserve(voxels.size());
  for (const Voxel& v : voxels) local.push_back({v[0] - lo[0] + 1, v[1] - lo[1] + 1, v[2] - lo[2] + 1});
  const HullVoxels hv = hull_voxels(local, sub);
  f.convex_area_vox = static_cast<long>(hv.voxels.size());

  f.bbox_area_vox = (hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1) * (hi[2] - lo[2] + 1);
  f.extent = static_cast<double>(n) / static_cast<double>(f.bbox_area_vox);
  f.solidity = static_cast<double>(n) / static_cast<double>(f.convex_area_vox);

  double feret2 = 0.0;
  const auto& hvx = hv.hull.vertices;
  for (std::size_t i = 0; i < hvx.size(); ++i)
    for (std::size_t j = i + 1; j < hvx.size(); ++j) {
      double d2 = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double dd = static_cast<double>(hvx[i][a] - hvx[j][a]) * spacing[a];
        d2 += dd * dd;
      }
      feret2 = std::max(feret2, d2);
    }
  f.max_feret_mm = std::sqrt(feret2);

  const double vol_mm3 = static_cast<double>(n) * spacing[0] * spacing[1] * spacing[2];
  f.equiv_diameter_mm = std::cbrt(6.0 * vol_mm3 / std::numbers::pi);

  auto stats = [&](const Volume* img, double& mn, double& mean, double& mx) {
    if (!img) return;
    if (!(img->dims() == grid)) throw ArgumentError("region_descriptors: image grid does not match the label map");
    mn = std::numeric_limits<double>::infinity();
    mx = -mn;
    double s = 0.0;
    for (const Voxel& v : voxels) {
      const double x = img->at(v[0], v[1], v[2]);
      mn = std::min(mn, x);
      mx = std::max(mx, x);
      s += x;
    }
    mean = s / static_cast<double>(n);
  };
  stats(ct, f.ct_min, f.ct_mean, f.ct_max);
  stats(pet, f.pet_min, f.pet_mean, f.pet_max);
  return f;
}

inline std::vector<std::vector<Voxel>> region_voxels(const LabelMap& lm) {
  std::vector<std::vector<Voxel>> out(static_cast<std::size_t>(lm.count));
  const Dims& d = lm.dims;
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x) {
        const auto l = lm.at(z, y, x);
        if (l > 0) out[static_cast<std::size_t>(l - 1)].push_back({static_cast<long>(z), static_cast<long>(y), static_cast<long>(x)});
      }
  return out;
}

}  // namespace detail

inline RegionFeatures region_descriptors(const LabelMap& lm, int label, const Volume& ct, const Volume& pet) {
  if (label < 1 || label > lm.count) throw ArgumentError("region_descriptors: unknown label " + std::to_string(label));
  std::vector<Voxel> voxels;
  const Dims& d = lm.dims;
  for (std::size_t z = 0; z < d.z; ++z)
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x)
        if (lm.at(z, y, x) == label) voxels.push_back({static_cast<long>(z), static_cast<long>(y), static_cast<long>(x)});
  return detail::describe(voxels, d, lm.spacing, lm.origin, &ct, &pet);
}

/// Descriptors for every component, in label order, with a single scan.
inline std::vector<RegionFeatures> all_region_descriptors(const LabelMap& lm, const Volume& ct, const Volume& pet) {
  std::vector<RegionFeatures> out;
  for (const auto& voxels : detail::region_voxels(lm))
    out.push_back(detail::describe(voxels, lm.dims, lm.spacing, lm.origin, &ct, &pet));
  return out;
}

struct PatientFeatureVector {
  std::vector<double> means = std::vector<double>(RegionFeatures::kSize, 0.0);
  int n_tumours = 0;

  double get(const std::string& name) const {
    const auto& n = RegionFeatures::names();
    const auto it = std::find(n.begin(), n.end(), name);
    if (it == n.end()) throw ArgumentError("PatientFeatureVector: unknown feature " + name);
    return means[static_cast<std::size_t>(it - n.begin())];
  }
};

inline PatientFeatureVector patient_feature_vector(const std::vector<RegionFeatures>& regions) {
  PatientFeatureVector p;
  p.n_tumours = static_cast<int>(regions.size());
  if (regions.empty()) return p;
  for (const auto& r : regions) {
    const auto v = r.to_vector();
    for (std::size_t i = 0; i < v.size(); ++i) p.means[i] += v[i];
  }
  for (double& m : p.means) m /= static_cast<double>(regions.size());
  return p;
}

inline const std::vector<std::string>& calibrated_feature_names() {
  static const std::vector<std::string> n = {"centroid_x", "centroid_y", "centroid_z", "ct_mean",
                                             "pet_mean",   "ct_max",     "n_tumours"};
  return n;
}

/// The descriptor subset used by the survival models:
/// (centroid x, y, z, mean CT, mean PET, max CT, number of tumours).
inline std::vector<double> select_calibrated_features(const PatientFeatureVector& p) {
  return {p.get("centroid_x_mm"), p.get("centroid_y_mm"), p.get("centroid_z_mm"), p.get("ct_mean"),
          p.get("pet_mean"),      p.get("ct_max"),        static_cast<double>(p.n_tumours)};
}

/// Same subset for a single region (node descriptors of the tumour graph);
/// the tumour count is the patient's.
inline std::vector<double> select_calibrated_features(const RegionFeatures& r, int n_tumours) {
  return {r.centroid_mm[2], r.centroid_mm[1], r.centroid_mm[0], r.ct_mean, r.pet_mean, r.ct_max,
          static_cast<double>(n_tumours)};
}

}  // namespace progkit
