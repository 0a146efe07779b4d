// Volumetric data model and intensity preprocessing.
//
// Axis order is (z, y, x) everywhere, z axial with index 0 the most superior
// slice. A voxel index k along an axis sits at physical position
// origin + k * spacing (voxel centre).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "progkit/core.hpp"

namespace progkit {

enum class Modality { CT, PET, Fused, Mask };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::CT: return "CT";
    case Modality::PET: return "PET";
    case Modality::Fused: return "FUSED";
    case Modality::Mask: return "MASK";
  }
  return "?";
}

struct Dims {
  std::size_t z = 1, y = 1, x = 1;
  std::size_t count() const { return z * y * x; }
  std::size_t operator[](int axis) const { return axis == 0 ? z : axis == 1 ? y : x; }
  bool operator==(const Dims&) const = default;
};

class Volume {
 public:
  Volume() : Volume(Dims{1, 1, 1}, {1, 1, 1}, {0, 0, 0}, Modality::CT) {}

  Volume(Dims dims, Vec3 spacing_mm, Vec3 origin_mm, Modality modality, float fill = 0.0f)
      : dims_(dims), spacing_(spacing_mm), origin_(origin_mm), modality_(modality) {
    if (dims.z < 1 || dims.y < 1 || dims.x < 1) throw ArgumentError("Volume: every dimension must be >= 1");
    for (double s : spacing_mm)
      if (!(s > 0.0) || !std::isfinite(s)) throw ArgumentError("Volume: spacing must be positive");
    data_.assign(dims.count(), fill);
  }

  const Dims& dims() const { return dims_; }
  const Vec3& spacing() const { return spacing_; }
  const Vec3& origin() const { return origin_; }
  Modality modality() const { return modality_; }
  void set_modality(Modality m) { modality_ = m; }
  void set_origin(const Vec3& o) { origin_ = o; }

  std::size_t size() const { return data_.size(); }
  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * dims_.y + y) * dims_.x + x; }
  float& at(std::size_t z, std::size_t y, std::size_t x) { return data_[index(z, y, x)]; }
  float at(std::size_t z, std::size_t y, std::size_t x) const { return data_[index(z, y, x)]; }

  bool contains(long z, long y, long x) const {
    return z >= 0 && y >= 0 && x >= 0 && static_cast<std::size_t>(z) < dims_.z &&
           static_cast<std::size_t>(y) < dims_.y && static_cast<std::size_t>(x) < dims_.x;
  }

  Vec3 position(double z, double y, double x) const {
    return {origin_[0] + z * spacing_[0], origin_[1] + y * spacing_[1], origin_[2] + x * spacing_[2]};
  }

  /// Physical extent covered by the voxel grid (voxel edges, not centres).
  Vec3 extent_mm() const {
    return {dims_.z * spacing_[0], dims_.y * spacing_[1], dims_.x * spacing_[2]};
  }

  float min_value() const { return *std::min_element(data_.begin(), data_.end()); }
  float max_value() const { return *std::max_element(data_.begin(), data_.end()); }

  /// True when every voxel is a non-negative integer (MASK invariant).
  bool is_label_map() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return v >= 0.0f && std::floor(v) == v; });
  }
  bool is_binary() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return v == 0.0f || v == 1.0f; });
  }

  bool same_grid(const Volume& o, double tol = 1e-6) const {
    if (!(dims_ == o.dims_)) return false;
    for (int a = 0; a < 3; ++a)
      if (std::abs(spacing_[a] - o.spacing_[a]) > tol) return false;
    return true;
  }

 private:
  Dims dims_;
  Vec3 spacing_;
  Vec3 origin_;
  Modality modality_;
  std::vector<float> data_;
};

/// Axis-aligned physical box, min corner is a voxel-edge coordinate.
struct BoxMM {
  Vec3 min_corner_mm{0, 0, 0};
  Vec3 size_mm{1, 1, 1};

  BoxMM() = default;
  BoxMM(Vec3 min_corner, Vec3 size) : min_corner_mm(min_corner), size_mm(size) {
    for (double s : size)
      if (!(s > 0.0)) throw ArgumentError("BoxMM: size components must be positive");
  }
};

enum class Interp { Trilinear, Nearest };

namespace detail {

inline double clamp_index(double c, std::size_t n) { return std::clamp(c, 0.0, static_cast<double>(n - 1)); }

// Sample at continuous voxel coordinates; coordinates are clamped to the grid.
inline float sample_trilinear(const Volume& v, double cz, double cy, double cx) {
  const Dims& d = v.dims();
  cz = clamp_index(cz, d.z);
  cy = clamp_index(cy, d.y);
  cx = clamp_index(cx, d.x);
  const std::size_t z0 = static_cast<std::size_t>(std::floor(cz));
  const std::size_t y0 = static_cast<std::size_t>(std::floor(cy));
  const std::size_t x0 = static_cast<std::size_t>(std::floor(cx));
  const std::size_t z1 = std::min(z0 + 1, d.z - 1);
  const std::size_t y1 = std::min(y0 + 1, d.y - 1);
  const std::size_t x1 = std::min(x0 + 1, d.x - 1);
  const double fz = cz - z0, fy = cy - y0, fx = cx - x0;
  // Skip zero-weight neighbours so that grid-aligned samples are copied exactly.
  auto lerp = [](double a, double b, double f) { return f == 0.0 ? a : a + (b - a) * f; };
  auto row = [&](std::size_t z, std::size_t y) {
    return lerp(v.at(z, y, x0), v.at(z, y, x1), fx);
  };
  const double c0 = lerp(row(z0, y0), row(z0, y1), fy);
  const double c1 = fz == 0.0 ? c0 : lerp(row(z1, y0), row(z1, y1), fy);
  return static_cast<float>(lerp(c0, c1, fz));
}

inline float sample_nearest(const Volume& v, double cz, double cy, double cx) {
  const Dims& d = v.dims();
  auto pick = [](double c, std::size_t n) {
    return static_cast<std::size_t>(clamp_index(std::floor(c + 0.5), n));
  };
  return v.at(pick(cz, d.z), pick(cy, d.y), pick(cx, d.x));
}

}  // namespace detail

/// Resample onto a new spacing covering the same physical extent. Output
/// voxel k is centred at input_edge + (k + 0.5) * spacing_out, where
/// input_edge = origin - 0.5 * spacing_in.
inline Volume resample(const Volume& v, const Vec3& target_spacing_mm, Interp mode) {
  for (double s : target_spacing_mm)
    if (!(s > 0.0) || !std::isfinite(s)) throw ArgumentError("resample: target spacing must be positive");
  const Dims& d = v.dims();
  const Vec3& sp = v.spacing();
  Dims out_dims;
  Vec3 out_origin;
  for (int a = 0; a < 3; ++a) {
    const double extent = d[a] * sp[a];
    const auto n = static_cast<std::size_t>(std::max(1.0, std::round(extent / target_spacing_mm[a])));
    (a == 0 ? out_dims.z : a == 1 ? out_dims.y : out_dims.x) = n;
    out_origin[a] = v.origin()[a] + 0.5 * target_spacing_mm[a] - 0.5 * sp[a];
  }
  Volume out(out_dims, target_spacing_mm, out_origin, v.modality());
  // Continuous input index of output sample k along each axis.
  auto coord = [&](int a, std::size_t k) {
    return (out_origin[a] + k * target_spacing_mm[a] - v.origin()[a]) / sp[a];
  };
  std::vector<double> cz(out_dims.z), cy(out_dims.y), cx(out_dims.x);
  for (std::size_t k = 0; k < out_dims.z; ++k) cz[k] = coord(0, k);
  for (std::size_t k = 0; k < out_dims.y; ++k) cy[k] = coord(1, k);
  for (std::size_t k = 0; k < out_dims.x; ++k) cx[k] = coord(2, k);
  for (std::size_t z = 0; z < out_dims.z; ++z)
    for (std::size_t y = 0; y < out_dims.y; ++y)
      for (std::size_t x = 0; x < out_dims.x; ++x)
        out.at(z, y, x) = mode == Interp::Trilinear ? detail::sample_trilinear(v, cz[z], cy[y], cx[x])
                                                    : detail::sample_nearest(v, cz[z], cy[y], cx[x]);
  return out;
}

inline Volume window_clip(const Volume& v, double lo, double hi) {
  if (!(lo < hi)) throw ArgumentError("window_clip: lo must be < hi");
  Volume out = v;
  const auto flo = static_cast<float>(lo), fhi = static_cast<float>(hi);
  for (float& x : out.data()) x = std::clamp(x, flo, fhi);
  return out;
}

/// Zero-mean, unit-variance rescaling. A constant volume maps to all zeros.
inline Volume znormalize(const Volume& v) {
  if (v.size() < 2) throw ArgumentError("znormalize: need at least two voxels");
  double mean = 0.0;
  for (float x : v.data()) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (float x : v.data()) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  const double sd = std::sqrt(var);
  Volume out = v;
  for (float& x : out.data()) x = sd > 0.0 ? static_cast<float>((x - mean) / sd) : 0.0f;
  return out;
}

inline Volume fuse_average(const Volume& ct, const Volume& pet) {
  if (!ct.same_grid(pet)) throw ArgumentError("fuse_average: CT and PET grids differ (resample first)");
  Volume out = ct;
  out.set_modality(Modality::Fused);
  auto o = out.data();
  auto p = pet.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>((static_cast<double>(o[i]) + p[i]) / 2.0);
  return out;
}

/// Crop (and pad) to a physical box, staying on the input voxel grid. The
/// output has floor(size / spacing) voxels per axis (at least one).
inline Volume crop_mm(const Volume& v, const BoxMM& box, float pad_value) {
  const Vec3& sp = v.spacing();
  Dims od;
  std::array<long, 3> start{};
  Vec3 out_origin;
  for (int a = 0; a < 3; ++a) {
    if (!(box.size_mm[a] > 0.0)) throw ArgumentError("crop_mm: box size must be positive");
    const auto n = static_cast<std::size_t>(std::max(1.0, std::floor(box.size_mm[a] / sp[a] + 1e-9)));
    (a == 0 ? od.z : a == 1 ? od.y : od.x) = n;
    // First input-grid voxel whose centre is not before the box edge.
    start[a] = static_cast<long>(std::ceil((box.min_corner_mm[a] - v.origin()[a]) / sp[a] - 1e-9));
    out_origin[a] = v.origin()[a] + start[a] * sp[a];
  }
  Volume out(od, sp, out_origin, v.modality(), pad_value);
  for (std::size_t z = 0; z < od.z; ++z) {
    const long iz = start[0] + static_cast<long>(z);
    if (iz < 0 || iz >= static_cast<long>(v.dims().z)) continue;
    for (std::size_t y = 0; y < od.y; ++y) {
      const long iy = start[1] + static_cast<long>(y);
      if (iy < 0 || iy >= static_cast<long>(v.dims().y)) continue;
      for (std::size_t x = 0; x < od.x; ++x) {
        const long ix = start[2] + static_cast<long>(x);
        if (ix < 0 || ix >= static_cast<long>(v.dims().x)) continue;
        out.at(z, y, x) = v.at(iz, iy, ix);
      }
    }
  }
  return out;
}

/// Pad value used by the out-of-bounds policy: -1024 HU for CT, otherwise the
/// volume minimum.
inline float default_pad(const Volume& v) { return v.modality() == Modality::CT ? -1024.0f : v.min_value(); }

/// Fixed-size patch at 1 mm spacing centred on a physical point. Samples that
/// fall outside the input are set to the volume minimum. When the input is
/// itself at 1 mm the patch is snapped to the input grid and copied exactly.
inline Volume extract_patch(const Volume& v, const Vec3& center_mm, const Dims& size_voxels) {
  if (size_voxels.z < 1 || size_voxels.y < 1 || size_voxels.x < 1)
    throw ArgumentError("extract_patch: size must be >= 1 on each axis");
  const float pad = v.min_value();
  const Vec3& sp = v.spacing();
  bool unit = true;
  for (double s : sp) unit = unit && std::abs(s - 1.0) < 1e-6;

  Vec3 origin;
  for (int a = 0; a < 3; ++a) origin[a] = center_mm[a] - 0.5 * (static_cast<double>(size_voxels[a]) - 1.0);
  if (unit) {
    for (int a = 0; a < 3; ++a) origin[a] = v.origin()[a] + std::round(origin[a] - v.origin()[a]);
  }
  Volume out(size_voxels, {1.0, 1.0, 1.0}, origin, v.modality(), pad);
  const Dims& d = v.dims();
  for (std::size_t z = 0; z < size_voxels.z; ++z)
    for (std::size_t y = 0; y < size_voxels.y; ++y)
      for (std::size_t x = 0; x < size_voxels.x; ++x) {
        const double cz = (origin[0] + z - v.origin()[0]) / sp[0];
        const double cy = (origin[1] + y - v.origin()[1]) / sp[1];
        const double cx = (origin[2] + x - v.origin()[2]) / sp[2];
        if (unit) {
          const long iz = std::lround(cz), iy = std::lround(cy), ix = std::lround(cx);
          if (v.contains(iz, iy, ix)) out.at(z, y, x) = v.at(iz, iy, ix);
        } else {
          // Inside the voxel-edge hull of the input grid.
          if (cz < -0.5 || cy < -0.5 || cx < -0.5 || cz > d.z - 0.5 || cy > d.y - 0.5 || cx > d.x - 0.5) continue;
          out.at(z, y, x) = detail::sample_trilinear(v, cz, cy, cx);
        }
      }
  return out;
}

}  // namespace progkit
