// Head-and-neck localization from axial intensity profiles.
//
// The brain shows up as the dominant PET peak close to the top of the scan
// and the neck as the sharpest fall of the mean CT value below it. Only the
// first 250 mm below the head top are searched for the brain so that bright
// inferior organs (bladder) cannot win.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "progkit/core.hpp"
#include "progkit/volume.hpp"

namespace progkit {

struct AxialProfile {
  std::vector<double> values;
  double spacing_mm = 1.0;
  double z0_mm = 0.0;

  AxialProfile() = default;
  AxialProfile(std::vector<double> v, double spacing, double z0)
      : values(std::move(v)), spacing_mm(spacing), z0_mm(z0) {
    if (values.size() < 2) throw ArgumentError("AxialProfile: need at least two slices");
    if (!(spacing_mm > 0.0)) throw ArgumentError("AxialProfile: spacing must be positive");
  }

  std::size_t size() const { return values.size(); }
  double z_of(std::size_t k) const { return z0_mm + static_cast<double>(k) * spacing_mm; }
  /// Slice index nearest to a physical z, clamped to the profile.
  std::size_t index_of(double z_mm) const {
    const double k = std::round((z_mm - z0_mm) / spacing_mm);
    return static_cast<std::size_t>(std::clamp(k, 0.0, static_cast<double>(values.size() - 1)));
  }
};

struct Landmarks {
  double head_top_mm = 0.0;
  double brain_peak_mm = 0.0;
  double neck_drop_mm = 0.0;
};

inline constexpr double kBrainSearchMM = 250.0;
inline constexpr double kRoiSizeMM = 440.0;

inline AxialProfile axial_profile(const Volume& v) {
  const Dims& d = v.dims();
  std::vector<double> values(d.z, 0.0);
  const std::size_t slice = d.y * d.x;
  auto data = v.data();
  for (std::size_t z = 0; z < d.z; ++z) {
    double s = 0.0;
    for (std::size_t i = 0; i < slice; ++i) s += data[z * slice + i];
    values[z] = s / static_cast<double>(slice);
  }
  if (values.size() < 2) values.push_back(values.back());
  return AxialProfile(std::move(values), v.spacing()[0], v.origin()[0]);
}

/// First slice from the superior end whose PET mean exceeds frac * max.
inline double find_head_top(const AxialProfile& pet, double frac = 0.05) {
  if (!(frac > 0.0 && frac < 1.0)) throw ArgumentError("find_head_top: frac must be in (0, 1)");
  const double peak = *std::max_element(pet.values.begin(), pet.values.end());
  if (!(peak > 0.0)) throw DetectionError("find_head_top: PET profile has no positive signal");
  const double thr = frac * peak;
  for (std::size_t k = 0; k < pet.size(); ++k)
    if (pet.values[k] > thr) return pet.z_of(k);
  throw DetectionError("find_head_top: no slice above threshold");
}

/// PET argmax restricted to [head_top, head_top + 250 mm]; ties go superior.
inline double find_brain_peak(const AxialProfile& pet, double head_top_mm) {
  const double last = pet.z_of(pet.size() - 1);
  if (head_top_mm < pet.z0_mm - 0.5 * pet.spacing_mm || head_top_mm > last + 0.5 * pet.spacing_mm)
    throw DetectionError("find_brain_peak: head top outside the profile");
  std::optional<std::size_t> best;
  for (std::size_t k = 0; k < pet.size(); ++k) {
    const double z = pet.z_of(k);
    if (z < head_top_mm - 1e-9 || z > head_top_mm + kBrainSearchMM + 1e-9) continue;
    if (!best || pet.values[k] > pet.values[*best]) best = k;
  }
  if (!best) throw DetectionError("find_brain_peak: empty search window");
  return pet.z_of(*best);
}

/// 3-tap moving mean; end slices average over the available neighbours.
inline std::vector<double> smooth3(const std::vector<double>& v) {
  std::vector<double> out(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) {
    const std::size_t lo = k == 0 ? 0 : k - 1;
    const std::size_t hi = std::min(k + 1, v.size() - 1);
    double s = 0.0;
    for (std::size_t j = lo; j <= hi; ++j) s += v[j];
    out[k] = s / static_cast<double>(hi - lo + 1);
  }
  return out;
}

/// Steepest fall of the smoothed CT profile in (brain_peak, brain_peak + window].
///
/// The drop d_k = s_k - s_{k-1} is attributed to slice k, the first slice
/// after the fall. Smoothing a step spreads it over a run of equal drops; the
/// centre of the run containing the minimum is reported (superior middle for
/// even runs). With `allow_none`, a profile without any fall yields the most
/// inferior slice of the window instead of an error.
inline double find_neck_drop(const AxialProfile& ct, double brain_peak_mm, double window_mm = 300.0,
                             bool allow_none = false) {
  if (!(window_mm > 0.0)) throw ArgumentError("find_neck_drop: window must be positive");
  const std::vector<double> s = smooth3(ct.values);
  std::vector<std::size_t> idx;
  for (std::size_t k = 1; k < s.size(); ++k) {
    const double z = ct.z_of(k);
    if (z > brain_peak_mm + 1e-9 && z <= brain_peak_mm + window_mm + 1e-9) idx.push_back(k);
  }
  if (idx.empty()) throw DetectionError("find_neck_drop: empty search window");
  double scale = 0.0;
  for (double x : s) scale = std::max(scale, std::abs(x));
  const double tol = 1e-9 * std::max(scale, 1.0);

  std::size_t best = 0;
  for (std::size_t i = 1; i < idx.size(); ++i)
    if (s[idx[i]] - s[idx[i] - 1] < s[idx[best]] - s[idx[best] - 1] - tol) best = i;
  const double dmin = s[idx[best]] - s[idx[best] - 1];
  if (!(dmin < -tol)) {
    if (allow_none) return ct.z_of(idx.back());
    throw DetectionError("find_neck_drop: CT profile never falls inside the window");
  }
  auto tied = [&](std::size_t i) { return std::abs((s[idx[i]] - s[idx[i] - 1]) - dmin) <= tol; };
  std::size_t lo = best, hi = best;
  while (lo > 0 && idx[lo - 1] + 1 == idx[lo] && tied(lo - 1)) --lo;
  while (hi + 1 < idx.size() && idx[hi] + 1 == idx[hi + 1] && tied(hi + 1)) ++hi;
  return ct.z_of(idx[lo + (hi - lo) / 2]);
}

inline bool valid(const Landmarks& lm) {
  return lm.head_top_mm <= lm.brain_peak_mm && lm.brain_peak_mm <= lm.neck_drop_mm &&
         lm.brain_peak_mm - lm.head_top_mm <= kBrainSearchMM + 1e-9;
}

/// 440 mm cube starting at the head top, centred in-plane on the PET centre
/// of mass of the covered slab.
inline BoxMM roi_box(const Landmarks& lm, const Volume& pet) {
  if (!valid(lm)) throw ArgumentError("roi_box: landmarks are inconsistent");
  const Dims& d = pet.dims();
  double mass = 0.0, my = 0.0, mx = 0.0;
  for (std::size_t z = 0; z < d.z; ++z) {
    const double zz = pet.position(static_cast<double>(z), 0, 0)[0];
    if (zz < lm.head_top_mm - 1e-9 || zz > lm.head_top_mm + kRoiSizeMM) continue;
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x) {
        const double w = std::max(0.0f, pet.at(z, y, x));
        mass += w;
        my += w * static_cast<double>(y);
        mx += w * static_cast<double>(x);
      }
  }
  double cy, cx;
  if (mass > 0.0) {
    cy = my / mass;
    cx = mx / mass;
  } else {
    cy = 0.5 * (static_cast<double>(d.y) - 1.0);
    cx = 0.5 * (static_cast<double>(d.x) - 1.0);
  }
  const Vec3 c = pet.position(0, cy, cx);
  return BoxMM({lm.head_top_mm, c[1] - 0.5 * kRoiSizeMM, c[2] - 0.5 * kRoiSizeMM}, {kRoiSizeMM, kRoiSizeMM, kRoiSizeMM});
}

struct Localization {
  Landmarks landmarks;
  BoxMM box;
  AxialProfile ct_profile;
  AxialProfile pet_profile;
};

struct LocalizeOptions {
  double coarse_spacing_mm = 7.0;
  double ct_lo = -1024.0, ct_hi = 1024.0;
  double head_frac = 0.05;
  double neck_window_mm = 300.0;
};

/// Full localization on a PET/CT pair sharing one grid: resample to the
/// coarse spacing, clip CT, profile, detect landmarks, build the box.
inline Localization localize(const Volume& ct, const Volume& pet, const LocalizeOptions& opt = {}) {
  if (!ct.same_grid(pet)) throw ArgumentError("localize: CT and PET must share a grid");
  const Vec3 coarse{opt.coarse_spacing_mm, opt.coarse_spacing_mm, opt.coarse_spacing_mm};
  const Volume ct_lo = window_clip(resample(ct, coarse, Interp::Trilinear), opt.ct_lo, opt.ct_hi);
  const Volume pet_lo = resample(pet, coarse, Interp::Trilinear);
  Localization out;
  out.ct_profile = axial_profile(ct_lo);
  out.pet_profile = axial_profile(pet_lo);
  Landmarks& lm = out.landmarks;
  lm.head_top_mm = find_head_top(out.pet_profile, opt.head_frac);
  lm.brain_peak_mm = find_brain_peak(out.pet_profile, lm.head_top_mm);
  lm.neck_drop_mm = find_neck_drop(out.ct_profile, lm.brain_peak_mm, opt.neck_window_mm, true);
  out.box = roi_box(lm, pet_lo);
  return out;
}

}  // namespace progkit
