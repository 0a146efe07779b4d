// NIfTI-1 single-file reader/writer (.nii and .nii.gz).
//
// Only axis-aligned affines are accepted. Volumes are reoriented on load so
// that index 0 along z is the most superior slice; internally the physical z
// coordinate therefore grows inferiorly (z_mm = -world_z in RAS terms), while
// y and x keep the world orientation with positive spacing.
#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "progkit/core.hpp"
#include "progkit/volume.hpp"

namespace progkit {

namespace nifti {

inline constexpr int kHeaderSize = 348;

enum DataType : std::int16_t {
  kUInt8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
};

namespace detail {

template <class T>
T byteswap_value(T v) {
  std::array<unsigned char, sizeof(T)> b;
  std::memcpy(b.data(), &v, sizeof(T));
  std::reverse(b.begin(), b.end());
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

class Reader {
 public:
  Reader(const unsigned char* p, bool swap) : p_(p), swap_(swap) {}
  template <class T>
  T get(std::size_t offset) const {
    T v;
    std::memcpy(&v, p_ + offset, sizeof(T));
    return swap_ ? byteswap_value(v) : v;
  }

 private:
  const unsigned char* p_;
  bool swap_;
};

// Reads the whole file; gzread passes uncompressed files through unchanged.
inline std::vector<unsigned char> slurp(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw FormatError("nifti: cannot open " + path);
  std::vector<unsigned char> buf;
  std::array<unsigned char, 1 << 16> chunk;
  for (;;) {
    const int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (n < 0) {
      gzclose(f);
      throw FormatError("nifti: read error in " + path);
    }
    if (n == 0) break;
    buf.insert(buf.end(), chunk.begin(), chunk.begin() + n);
  }
  gzclose(f);
  return buf;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

using Mat34 = std::array<std::array<double, 4>, 3>;

inline Mat34 qform_matrix(const Reader& r) {
  const double b = r.get<float>(256), c = r.get<float>(260), d = r.get<float>(264);
  const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
  const double qfac = r.get<float>(76) < 0 ? -1.0 : 1.0;
  const double dx = r.get<float>(80), dy = r.get<float>(84), dz = r.get<float>(88) * qfac;
  Mat34 m{};
  m[0] = {(a * a + b * b - c * c - d * d) * dx, 2 * (b * c - a * d) * dy, 2 * (b * d + a * c) * dz, r.get<float>(268)};
  m[1] = {2 * (b * c + a * d) * dx, (a * a + c * c - b * b - d * d) * dy, 2 * (c * d - a * b) * dz, r.get<float>(272)};
  m[2] = {2 * (b * d - a * c) * dx, 2 * (c * d + a * b) * dy, (a * a + d * d - c * c - b * b) * dz, r.get<float>(276)};
  return m;
}

}  // namespace detail
}  // namespace nifti

/// Load a NIfTI-1 volume. The modality is taken from a "progkit:" tag in the
/// description field when present, otherwise `hint`.
inline Volume load_nifti(const std::string& path, Modality hint = Modality::CT) {
  using namespace nifti;
  using namespace nifti::detail;
  const std::vector<unsigned char> buf = slurp(path);
  if (buf.size() < static_cast<std::size_t>(kHeaderSize)) throw FormatError("nifti: truncated header in " + path);

  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, buf.data(), 4);
  bool swap = false;
  if (sizeof_hdr != kHeaderSize) {
    if (byteswap_value(sizeof_hdr) != kHeaderSize) throw FormatError("nifti: bad sizeof_hdr in " + path);
    swap = true;
  }
  if (std::endian::native == std::endian::big) swap = !swap;
  const Reader r(buf.data(), swap);

  const char* magic = reinterpret_cast<const char*>(buf.data() + 344);
  if (std::strncmp(magic, "n+1", 4) != 0 && std::strncmp(magic, "ni1", 4) != 0)
    throw FormatError("nifti: bad magic in " + path);
  if (std::strncmp(magic, "ni1", 4) == 0) throw UnsupportedError("nifti: two-file (.hdr/.img) pairs are not supported");

  const auto ndim = r.get<std::int16_t>(40);
  if (ndim < 1 || ndim > 7) throw FormatError("nifti: invalid dim[0]");
  std::array<std::int64_t, 3> n{1, 1, 1};  // (i, j, k)
  for (int a = 0; a < 3 && a < ndim; ++a) n[a] = r.get<std::int16_t>(42 + 2 * a);
  for (int a = 3; a < ndim; ++a)
    if (r.get<std::int16_t>(42 + 2 * a) > 1) throw UnsupportedError("nifti: 4D+ series are not supported");
  for (auto v : n)
    if (v < 1) throw FormatError("nifti: non-positive dimension");

  const auto datatype = r.get<std::int16_t>(70);
  std::size_t bytes = 0;
  switch (datatype) {
    case kUInt8: bytes = 1; break;
    case kInt16: bytes = 2; break;
    case kInt32: bytes = 4; break;
    case kFloat32: bytes = 4; break;
    case kFloat64: bytes = 8; break;
    default: throw UnsupportedError("nifti: unsupported datatype " + std::to_string(datatype));
  }

  const auto vox_offset = static_cast<std::size_t>(r.get<float>(108));
  const std::size_t count = static_cast<std::size_t>(n[0] * n[1] * n[2]);
  if (vox_offset < static_cast<std::size_t>(kHeaderSize) || buf.size() < vox_offset + count * bytes)
    throw FormatError("nifti: truncated voxel data in " + path);

  // Affine: sform preferred, then qform, then pixdim only.
  Mat34 m{};
  const auto qform_code = r.get<std::int16_t>(252);
  const auto sform_code = r.get<std::int16_t>(254);
  if (sform_code > 0) {
    for (int row = 0; row < 3; ++row)
      for (int col = 0; col < 4; ++col) m[row][col] = r.get<float>(280 + 16 * row + 4 * col);
  } else if (qform_code > 0) {
    m = qform_matrix(r);
  } else {
    m[0] = {r.get<float>(80), 0, 0, 0};
    m[1] = {0, r.get<float>(84), 0, 0};
    m[2] = {0, 0, r.get<float>(88), 0};
  }
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 3; ++col) {
      if (row == col) continue;
      if (std::abs(m[row][col]) >= 1e-3) throw UnsupportedError("nifti: oblique affine not supported in " + path);
      m[row][col] = 0.0;
    }
  for (int a = 0; a < 3; ++a)
    if (!(std::abs(m[a][a]) > 0.0)) throw FormatError("nifti: zero voxel size in affine");

  double slope = r.get<float>(112), inter = r.get<float>(116);
  if (!std::isfinite(slope) || slope == 0.0) {
    slope = 1.0;
    inter = 0.0;
  }
  if (!std::isfinite(inter)) inter = 0.0;

  const unsigned char* raw = buf.data() + vox_offset;
  auto value = [&](std::size_t idx) -> double {
    const unsigned char* p = raw + idx * bytes;
    switch (datatype) {
      case kUInt8: return *p;
      case kInt16: { std::int16_t v; std::memcpy(&v, p, 2); return swap ? byteswap_value(v) : v; }
      case kInt32: { std::int32_t v; std::memcpy(&v, p, 4); return swap ? byteswap_value(v) : v; }
      case kFloat32: { float v; std::memcpy(&v, p, 4); return swap ? byteswap_value(v) : v; }
      default: { double v; std::memcpy(&v, p, 8); return swap ? byteswap_value(v) : v; }
    }
  };

  // Flip flags: x, y must run along +world; z must run toward -world (inferior).
  const bool flip_i = m[0][0] < 0, flip_j = m[1][1] < 0, flip_k = m[2][2] > 0;
  const Dims dims{static_cast<std::size_t>(n[2]), static_cast<std::size_t>(n[1]), static_cast<std::size_t>(n[0])};
  const Vec3 spacing{std::abs(m[2][2]), std::abs(m[1][1]), std::abs(m[0][0])};
  Vec3 origin;
  origin[2] = flip_i ? m[0][3] + m[0][0] * (n[0] - 1) : m[0][3];
  origin[1] = flip_j ? m[1][3] + m[1][1] * (n[1] - 1) : m[1][3];
  origin[0] = flip_k ? -(m[2][3] + m[2][2] * (n[2] - 1)) : -m[2][3];

  Modality modality = hint;
  std::string descrip(reinterpret_cast<const char*>(buf.data() + 148), strnlen(reinterpret_cast<const char*>(buf.data() + 148), 80));
  if (descrip.rfind("progkit:", 0) == 0) {
    const std::string tag = descrip.substr(8);
    if (tag == "CT") modality = Modality::CT;
    else if (tag == "PET") modality = Modality::PET;
    else if (tag == "FUSED") modality = Modality::Fused;
    else if (tag == "MASK") modality = Modality::Mask;
  }

  Volume vol(dims, spacing, origin, modality);
  const bool scaled = !(slope == 1.0 && inter == 0.0);
  for (std::int64_t k = 0; k < n[2]; ++k)
    for (std::int64_t j = 0; j < n[1]; ++j)
      for (std::int64_t i = 0; i < n[0]; ++i) {
        const std::size_t src = static_cast<std::size_t>(i + n[0] * (j + n[1] * k));
        const double v = value(src);
        const auto z = static_cast<std::size_t>(flip_k ? n[2] - 1 - k : k);
        const auto y = static_cast<std::size_t>(flip_j ? n[1] - 1 - j : j);
        const auto x = static_cast<std::size_t>(flip_i ? n[0] - 1 - i : i);
        vol.at(z, y, x) = static_cast<float>(scaled ? v * slope + inter : v);
      }
  return vol;
}

/// Write a little-endian single-file NIfTI-1. Masks whose labels fit in a
/// byte are stored as uint8, everything else as float32. A ".gz" suffix
/// selects gzip compression.
inline void save_nifti(const Volume& v, const std::string& path) {
  using namespace nifti;
  const bool as_u8 = v.modality() == Modality::Mask && v.is_label_map() && v.max_value() <= 255.0f;
  const std::int16_t datatype = as_u8 ? kUInt8 : kFloat32;
  const std::size_t bytes = as_u8 ? 1 : 4;

  std::vector<unsigned char> out(352 + v.size() * bytes, 0);
  auto put = [&](std::size_t off, auto val) {
    static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");
    std::memcpy(out.data() + off, &val, sizeof(val));
  };
  const Dims& d = v.dims();
  const Vec3& sp = v.spacing();
  const Vec3& o = v.origin();
  put(0, std::int32_t{kHeaderSize});
  put(40, std::int16_t{3});
  put(42, static_cast<std::int16_t>(d.x));
  put(44, static_cast<std::int16_t>(d.y));
  put(46, static_cast<std::int16_t>(d.z));
  for (int a = 4; a < 8; ++a) put(40 + 2 * a, std::int16_t{1});
  put(70, datatype);
  put(72, static_cast<std::int16_t>(bytes * 8));
  // qfac = -1 encodes the inferior-running z axis with an identity rotation.
  put(76, -1.0f);
  put(80, static_cast<float>(sp[2]));
  put(84, static_cast<float>(sp[1]));
  put(88, static_cast<float>(sp[0]));
  for (int a = 4; a < 8; ++a) put(76 + 4 * a, 1.0f);
  put(108, 352.0f);
  put(112, 1.0f);
  put(116, 0.0f);
  put(123, static_cast<unsigned char>(2));  // mm
  const std::string descrip = "progkit:" + to_string(v.modality());
  std::memcpy(out.data() + 148, descrip.data(), std::min<std::size_t>(descrip.size(), 79));
  put(252, std::int16_t{1});
  put(254, std::int16_t{1});
  put(268, static_cast<float>(o[2]));
  put(272, static_cast<float>(o[1]));
  put(276, static_cast<float>(-o[0]));
  const std::array<std::array<float, 4>, 3> srow{{
      {static_cast<float>(sp[2]), 0.0f, 0.0f, static_cast<float>(o[2])},
      {0.0f, static_cast<float>(sp[1]), 0.0f, static_cast<float>(o[1])},
      {0.0f, 0.0f, static_cast<float>(-sp[0]), static_cast<float>(-o[0])},
  }};
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 4; ++col) put(280 + 16 * row + 4 * col, srow[row][col]);
  std::memcpy(out.data() + 344, "n+1\0", 4);

  auto data = v.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (as_u8) out[352 + i] = static_cast<unsigned char>(data[i]);
    else std::memcpy(out.data() + 352 + 4 * i, &data[i], 4);
  }

  const bool gz = nifti::detail::ends_with(path, ".gz");
  gzFile f = gzopen(path.c_str(), gz ? "wb6" : "wbT");
  if (!f) throw FormatError("nifti: cannot open " + path + " for writing");
  std::size_t done = 0;
  while (done < out.size()) {
    const auto chunk = static_cast<unsigned>(std::min<std::size_t>(out.size() - done, 1u << 30));
    if (gzwrite(f, out.data() + done, chunk) != static_cast<int>(chunk)) {
      gzclose(f);
      throw FormatError("nifti: write failed for " + path);
    }
    done += chunk;
  }
  if (gzclose(f) != Z_OK) throw FormatError("nifti: close failed for " + path);
}

}  // namespace progkit
