// Whole-body PET/CT phantom shared by the localizer tests and the acceptance run.
#pragma once

#include <cmath>

#include "progkit/core.hpp"
#include "progkit/volume.hpp"

namespace phantom {

struct Body {
  double head_top_mm = 40.0;  // first slice of tissue
  double z_spacing = 5.0;
  double xy_spacing = 6.0;
  std::size_t nz = 200, nxy = 64;
  double head_radius = 80.0, head_len = 190.0;
  double neck_radius = 50.0, neck_len = 70.0;
  double brain_depth = 80.0, brain_radius = 60.0, brain_uptake = 8.0;
  double bladder_offset = 500.0, bladder_radius = 40.0, bladder_uptake = 15.0;
  double pet_scale = 1.0, ct_shift = 0.0;
  bool bladder = true;

  double brain_z() const { return head_top_mm + brain_depth; }
  double neck_top() const { return head_top_mm + head_len; }
};

struct Pair {
  progkit::Volume ct, pet;
};

inline Pair make(const Body& b) {
  using namespace progkit;
  const Dims d{b.nz, b.nxy, b.nxy};
  const Vec3 sp{b.z_spacing, b.xy_spacing, b.xy_spacing};
  Volume ct(d, sp, {0, 0, 0}, Modality::CT, static_cast<float>(-1000.0 + b.ct_shift));
  Volume pet(d, sp, {0, 0, 0}, Modality::PET, 0.0f);
  const double c = 0.5 * static_cast<double>(b.nxy - 1) * b.xy_spacing;
  for (std::size_t z = 0; z < d.z; ++z) {
    const double zz = static_cast<double>(z) * b.z_spacing;
    const double depth = zz - b.head_top_mm;
    if (depth < 0) continue;
    for (std::size_t y = 0; y < d.y; ++y)
      for (std::size_t x = 0; x < d.x; ++x) {
        const double dy = static_cast<double>(y) * b.xy_spacing - c;
        const double dx = static_cast<double>(x) * b.xy_spacing - c;
        const double r2 = dy * dy + dx * dx;
        bool inside;
        if (depth < b.head_len)
          inside = r2 <= b.head_radius * b.head_radius;
        else if (depth < b.head_len + b.neck_len)
          inside = r2 <= b.neck_radius * b.neck_radius;
        else
          inside = (dy / 110.0) * (dy / 110.0) + (dx / 150.0) * (dx / 150.0) <= 1.0;
        if (!inside) continue;
        ct.at(z, y, x) = static_cast<float>(40.0 + b.ct_shift);
        double u = 1.0;
        const double bz = zz - b.brain_z();
        if (bz * bz + r2 <= b.brain_radius * b.brain_radius) u = b.brain_uptake;
        const double qz = zz - (b.brain_z() + b.bladder_offset);
        if (b.bladder && qz * qz + r2 <= b.bladder_radius * b.bladder_radius) u = b.bladder_uptake;
        pet.at(z, y, x) = static_cast<float>(u * b.pet_scale);
      }
  }
  return {std::move(ct), std::move(pet)};
}

}  // namespace phantom
