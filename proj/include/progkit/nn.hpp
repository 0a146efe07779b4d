// Neural survival models trained with the MTLR likelihood.
//
//   deep fusion:  RoI patch -> encoder -> [embedding | EHR] -> MLP -> K logits
//   multi-patch:  tumour patches -> encoder -> [embedding | descriptors]
//                 -> GATv2 -> GATv2 -> mean over nodes -> [pooled | EHR]
//                 -> MLP -> K logits
//
// Encoder: valid 3x3x3 convolution (1 -> C channels), batch norm, ReLU,
// global average pool, affine projection. Every block has a hand-written
// backward pass; parameters are 64-bit.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "progkit/core.hpp"
#include "progkit/csv.hpp"
#include "progkit/mtlr.hpp"
#include "progkit/survival.hpp"
#include "progkit/volume.hpp"

namespace progkit::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Tensors = std::map<std::string, Mat>;
using Adjacency = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

enum class ModelKind { DeepFusion, MultiPatch };

inline std::string to_string(ModelKind k) { return k == ModelKind::DeepFusion ? "deep_fusion" : "multi_patch"; }

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "deep_fusion") return ModelKind::DeepFusion;
  if (s == "multi_patch") return ModelKind::MultiPatch;
  throw ArgumentError("unknown model kind '" + s + "'");
}

inline Dims default_patch(ModelKind k) { return k == ModelKind::DeepFusion ? Dims{50, 80, 80} : Dims{32, 32, 32}; }

struct ModelConfig {
  ModelKind kind = ModelKind::MultiPatch;
  Dims patch{32, 32, 32};
  int channels = 16;
  int embed = 64;
  int graph_width = 64;
  int hidden = 64;
  int n_descriptors = 7;
  int n_ehr = 0;
  int K = 1;
  double leaky_slope = 0.2;
  bool batch_norm = true;
  bool conv_float32 = true;  // convolution arithmetic precision
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  int head_input() const { return (kind == ModelKind::MultiPatch ? graph_width : embed) + n_ehr; }
};

struct Params {
  Tensors w;
  Vec running_mean, running_var;

  const Mat& operator[](const std::string& k) const {
    auto it = w.find(k);
    if (it == w.end()) throw ArgumentError("missing parameter '" + k + "'");
    return it->second;
  }
};

struct InputScaling {
  Vec desc_mean, desc_scale, ehr_mean, ehr_scale;
};

struct Model {
  ModelConfig config;
  Params params;
  InputScaling scaling;
  TimeBins bins;
  std::uint64_t seed = 0;
};

inline std::vector<std::pair<std::string, std::pair<int, int>>> parameter_shapes(const ModelConfig& c) {
  std::vector<std::pair<std::string, std::pair<int, int>>> s{
      {"conv.weight", {c.channels, 27}}, {"conv.bias", {c.channels, 1}},
      {"bn.weight", {c.channels, 1}},    {"bn.bias", {c.channels, 1}},
      {"proj.weight", {c.embed, c.channels}}, {"proj.bias", {c.embed, 1}}};
  if (c.kind == ModelKind::MultiPatch) {
    const int d0 = c.embed + c.n_descriptors;
    s.push_back({"gat1.weight", {c.graph_width, 2 * d0}});
    s.push_back({"gat1.att", {c.graph_width, 1}});
    s.push_back({"gat2.weight", {c.graph_width, 2 * c.graph_width}});
    s.push_back({"gat2.att", {c.graph_width, 1}});
  }
  s.push_back({"mlp1.weight", {c.hidden, c.head_input()}});
  s.push_back({"mlp1.bias", {c.hidden, 1}});
  s.push_back({"mlp2.weight", {c.K, c.hidden}});
  s.push_back({"mlp2.bias", {c.K, 1}});
  return s;
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero; batch-norm
/// scale one.
inline Params init_params(const ModelConfig& c, std::uint64_t seed) {
  if (c.K < 1 || c.channels < 1 || c.embed < 1 || c.hidden < 1 || c.graph_width < 1)
    throw ArgumentError("init_params: widths must be positive");
  Rng rng(seed);
  Params p;
  for (const auto& [name, shape] : parameter_shapes(c)) {
    Mat m = Mat::Zero(shape.first, shape.second);
    const bool bias = name.ends_with(".bias");
    if (name == "bn.weight") {
      m.setOnes();
    } else if (!bias) {
      const int fan_in = name.ends_with(".att") ? shape.first : shape.second;
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
    }
    p.w.emplace(name, std::move(m));
  }
  p.running_mean = Vec::Zero(c.channels);
  p.running_var = Vec::Ones(c.channels);
  return p;
}

inline Model make_model(const ModelConfig& c, const TimeBins& bins, std::uint64_t seed) {
  if (c.K != bins.size()) throw ArgumentError("make_model: K differs from the bin count");
  Model m{c, init_params(c, seed), {}, bins, seed};
  m.scaling.desc_mean = Vec::Zero(c.n_descriptors);
  m.scaling.desc_scale = Vec::Ones(c.n_descriptors);
  m.scaling.ehr_mean = Vec::Zero(c.n_ehr);
  m.scaling.ehr_scale = Vec::Ones(c.n_ehr);
  return m;
}

inline Tensors zeros_like(const Tensors& t) {
  Tensors z;
  for (const auto& [k, v] : t) z.emplace(k, Mat::Zero(v.rows(), v.cols()));
  return z;
}

// ---------------------------------------------------------------- encoder

template <class T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using VecT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Rows are output voxels (raster order); column k holds neighbour k in
/// (dz, dy, dx) lexicographic order.
template <class T>
void im2col_into(const Volume& p, MatT<T>& X) {
  const Dims d = p.dims();
  if (d.z < 3 || d.y < 3 || d.x < 3) throw ArgumentError("im2col: patch smaller than the kernel");
  const std::size_t oz = d.z - 2, oy = d.y - 2, ox = d.x - 2;
  const auto nv = static_cast<Eigen::Index>(oz * oy * ox);
  X.resize(nv, 27);
  const float* src = p.data().data();
  for (std::size_t k = 0; k < 27; ++k) {
    const std::size_t dz = k / 9, dy = (k / 3) % 3, dx = k % 3;
    T* out = X.col(static_cast<Eigen::Index>(k)).data();
    for (std::size_t z = 0; z < oz; ++z)
      for (std::size_t y = 0; y < oy; ++y) {
        const float* row = src + ((z + dz) * d.y + (y + dy)) * d.x + dx;
        for (std::size_t x = 0; x < ox; ++x) *out++ = static_cast<T>(row[x]);
      }
  }
}

inline Mat im2col(const Volume& p) {
  Mat X;
  im2col_into<double>(p, X);
  return X;
}

struct EncoderCache {
  std::vector<const Volume*> patches;
  std::vector<Eigen::MatrixXf> y32;  // conv outputs (voxels x channels), kept when they fit the budget
  std::vector<Mat> y64;
  Vec mean, var;  // normalization statistics actually used
  Mat pooled;     // channels x patches
  bool train = false;
  Eigen::Index voxels = 0;
};

inline constexpr std::size_t kEncoderCacheBudget = std::size_t{1} << 25;  // scalars

inline void check_patch(const ModelConfig& c, const Volume& v) {
  const Dims d = v.dims();
  if (d.z != c.patch.z || d.y != c.patch.y || d.x != c.patch.x)
    throw ArgumentError("encoder: patch dims (" + std::to_string(d.z) + "," + std::to_string(d.y) + "," +
                        std::to_string(d.x) + ") differ from the configured (" + std::to_string(c.patch.z) + "," +
                        std::to_string(c.patch.y) + "," + std::to_string(c.patch.x) + ")");
}

namespace detail {

template <class T>
std::vector<MatT<T>>& y_cache(EncoderCache& c) {
  if constexpr (std::is_same_v<T, float>) return c.y32;
  else return c.y64;
}

// Per-thread scratch reused across calls.
template <class T>
MatT<T>& scratch(int slot) {
  thread_local MatT<T> buf[3];
  return buf[slot];
}

template <class T>
struct Conv {
  MatT<T> Wt;  // 27 x channels
  Eigen::Matrix<T, 1, Eigen::Dynamic> b;
  MatT<T>& X = scratch<T>(0);

  explicit Conv(const Params& p)
      : Wt(p["conv.weight"].transpose().cast<T>()), b(p["conv.bias"].col(0).transpose().cast<T>()) {}

  void run(const Volume& v, MatT<T>& Y) {
    im2col_into<T>(v, X);
    Y.noalias() = X * Wt;
    Y.rowwise() += b;
  }
};

template <class T>
Mat encode_impl(const Model& m, const std::vector<const Volume*>& patches, bool train, EncoderCache* cache) {
  const ModelConfig& c = m.config;
  const Params& p = m.params;
  const auto N = static_cast<Eigen::Index>(patches.size());
  const Eigen::Index C = c.channels;
  const Eigen::Index Nv = static_cast<Eigen::Index>((c.patch.z - 2) * (c.patch.y - 2) * (c.patch.x - 2));
  const bool keep = cache && static_cast<std::size_t>(N * Nv * C) <= kEncoderCacheBudget;
  Conv<T> conv(p);
  std::vector<MatT<T>> ys;
  if (keep) ys = std::move(y_cache<T>(*cache));
  ys.resize(keep ? static_cast<std::size_t>(N) : 0);
  std::size_t filled = 0;
  MatT<T>& Y = scratch<T>(1);
  auto get = [&](Eigen::Index k) -> const MatT<T>& {
    const auto i = static_cast<std::size_t>(k);
    if (i < filled) return ys[i];
    MatT<T>& out = keep ? ys[i] : Y;
    conv.run(*patches[i], out);
    if (keep) filled = i + 1;
    return out;
  };

  Vec mean = Vec::Zero(C), var = Vec::Ones(C);
  if (c.batch_norm && train) {
    // Shifted one-pass moments; the shift is the first patch's first voxel.
    Vec s = Vec::Zero(C), ss = Vec::Zero(C), shift(C);
    for (Eigen::Index k = 0; k < N; ++k) {
      const MatT<T>& Yk = get(k);
      if (k == 0) shift = Yk.row(0).transpose().template cast<double>();
      for (Eigen::Index i = 0; i < C; ++i) {
        const auto d = (Yk.col(i).array() - static_cast<T>(shift(i)));
        s(i) += static_cast<double>(d.sum());
        ss(i) += static_cast<double>(d.square().sum());
      }
    }
    const double M = static_cast<double>(N * Nv);
    const Vec d = s / M;
    mean = shift + d;
    var = (ss / M - d.cwiseAbs2()).cwiseMax(0.0);
  } else if (c.batch_norm) {
    mean = p.running_mean;
    var = p.running_var;
  }
  const Vec inv_std = (var.array() + c.bn_eps).rsqrt();
  Vec a = Vec::Ones(C), b = Vec::Zero(C);
  if (c.batch_norm) {
    a = p["bn.weight"].col(0).cwiseProduct(inv_std);
    b = p["bn.bias"].col(0) - a.cwiseProduct(mean);
  }
  Mat pooled(C, N);
  for (Eigen::Index k = 0; k < N; ++k) {
    const MatT<T>& Yk = get(k);
    for (Eigen::Index i = 0; i < C; ++i)
      pooled(i, k) = static_cast<double>(
                         (Yk.col(i).array() * static_cast<T>(a(i)) + static_cast<T>(b(i))).max(T(0)).sum()) /
                     static_cast<double>(Nv);
  }
  Mat E = p["proj.weight"] * pooled;
  E.colwise() += p["proj.bias"].col(0);
  if (cache) {
    cache->patches = patches;
    y_cache<T>(*cache) = std::move(ys);
    cache->mean = mean;
    cache->var = var;
    cache->pooled = pooled;
    cache->train = train;
    cache->voxels = Nv;
  }
  return E;
}

template <class T>
void encode_backward_impl(const Model& m, EncoderCache& cache, const Mat& dE, Tensors& g) {
  const ModelConfig& c = m.config;
  const Params& p = m.params;
  const auto N = static_cast<Eigen::Index>(cache.patches.size());
  const Eigen::Index C = c.channels, Nv = cache.voxels;
  g["proj.weight"] += dE * cache.pooled.transpose();
  g["proj.bias"] += dE.rowwise().sum();
  const Mat dP = p["proj.weight"].transpose() * dE;  // channels x N

  Vec mu = cache.mean, inv_std = (cache.var.array() + c.bn_eps).rsqrt(), gamma = p["bn.weight"].col(0),
      beta = p["bn.bias"].col(0);
  if (!c.batch_norm) {
    // Same arithmetic with xhat = y and an identity affine map.
    mu.setZero();
    inv_std.setOnes();
    gamma.setOnes();
    beta.setZero();
  }
  const Vec scale = gamma.cwiseProduct(inv_std);

  // S1 = sum dZ^T X, S2 = sum xhat^T X, q = column sums of X.
  Mat S1 = Mat::Zero(C, 27), S2 = Mat::Zero(C, 27);
  Vec q = Vec::Zero(27), A = Vec::Zero(C), B = Vec::Zero(C), xsum = Vec::Zero(C);
  Conv<T> conv(p);
  MatT<T> G;
  MatT<T>& Yw = scratch<T>(1);
  MatT<T>& S = scratch<T>(2);
  S.resize(Nv, 2 * C);
  const std::vector<MatT<T>>& ys = y_cache<T>(cache);
  for (Eigen::Index k = 0; k < N; ++k) {
    const Volume& vol = *cache.patches[static_cast<std::size_t>(k)];
    if (ys.empty()) conv.run(vol, Yw);
    else im2col_into<T>(vol, conv.X);
    const MatT<T>& Y = ys.empty() ? Yw : ys[static_cast<std::size_t>(k)];
    for (Eigen::Index i = 0; i < C; ++i) {
      const T up = static_cast<T>(dP(i, k) / static_cast<double>(Nv));
      S.col(C + i) = (Y.col(i).array() - static_cast<T>(mu(i))) * static_cast<T>(inv_std(i));
      S.col(i) = ((S.col(C + i).array() * static_cast<T>(gamma(i)) + static_cast<T>(beta(i))) > T(0))
                     .template cast<T>() * up;
      A(i) += static_cast<double>(S.col(i).sum());
      B(i) += static_cast<double>(S.col(i).dot(S.col(C + i)));
      xsum(i) += static_cast<double>(S.col(C + i).sum());
    }
    G.noalias() = S.transpose() * conv.X;
    S1 += G.topRows(C).template cast<double>();
    S2 += G.bottomRows(C).template cast<double>();
    q += conv.X.colwise().sum().transpose().template cast<double>();
  }
  Mat dW;
  Vec db;
  if (c.batch_norm) {
    g["bn.weight"] += B;
    g["bn.bias"] += A;
  }
  if (c.batch_norm && cache.train) {
    // dY = scale * (dZ - A/M - xhat * B/M)
    const double M = static_cast<double>(N * Nv);
    dW = S1 - (A / M) * q.transpose() - (B / M).asDiagonal() * S2;
    db = -(B / M).cwiseProduct(xsum);
  } else {
    dW = S1;
    db = A;
  }
  g["conv.weight"] += scale.asDiagonal() * dW;
  g["conv.bias"] += scale.cwiseProduct(db);
}

}  // namespace detail

/// Embeds a batch of patches (embed x N). Training mode normalizes with the
/// statistics of the whole batch.
inline Mat encode(const Model& m, const std::vector<const Volume*>& patches, bool train, EncoderCache* cache = nullptr) {
  if (patches.empty()) throw ArgumentError("encode: no patches");
  for (const Volume* v : patches) check_patch(m.config, *v);
  return m.config.conv_float32 ? detail::encode_impl<float>(m, patches, train, cache)
                               : detail::encode_impl<double>(m, patches, train, cache);
}

/// Accumulates encoder parameter gradients for upstream gradient dE.
inline void encode_backward(const Model& m, EncoderCache& cache, const Mat& dE, Tensors& g) {
  if (m.config.conv_float32) detail::encode_backward_impl<float>(m, cache, dE, g);
  else detail::encode_backward_impl<double>(m, cache, dE, g);
}

/// Running-statistics update after a training batch.
inline void update_running_stats(Model& m, const EncoderCache& cache) {
  if (!m.config.batch_norm || !cache.train) return;
  const double M = static_cast<double>(cache.patches.size()) * static_cast<double>(cache.voxels);
  const double mo = m.config.bn_momentum;
  m.params.running_mean = (1.0 - mo) * m.params.running_mean + mo * cache.mean;
  const Vec unbiased = M > 1 ? Vec(cache.var * (M / (M - 1.0))) : cache.var;
  m.params.running_var = (1.0 - mo) * m.params.running_var + mo * unbiased;
}

/// Inference-mode embedding of a single patch.
inline Vec conv_encode(const Model& m, const Volume& patch) { return encode(m, {&patch}, false).col(0); }


// ------------------------------------------------------------------ GATv2

struct GatCache {
  Mat H, U, V, alpha, pre;
  Adjacency adj;
};

inline Adjacency complete_graph(Eigen::Index n) { return Adjacency::Constant(n, n, true); }

inline Mat gatv2_layer(const Mat& H, const Adjacency& adj, const Mat& W, const Vec& a, double slope = 0.2,
                       GatCache* cache = nullptr) {
  const Eigen::Index n = H.rows(), d = H.cols();
  if (W.cols() != 2 * d || a.size() != W.rows()) throw ArgumentError("gatv2_layer: weight shapes do not match");
  if (adj.rows() != n || adj.cols() != n) throw ArgumentError("gatv2_layer: adjacency size mismatch");
  for (Eigen::Index i = 0; i < n; ++i)
    if (!adj(i, i)) throw ArgumentError("gatv2_layer: adjacency needs self-loops");
  const Mat U = H * W.leftCols(d).transpose();
  const Mat V = H * W.rightCols(d).transpose();
  Mat alpha = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!adj(i, j)) continue;
      const Eigen::ArrayXd s = (U.row(i) + V.row(j)).transpose().array();
      const double e = a.dot((s > 0.0).select(s, slope * s).matrix());
      alpha(i, j) = e;
      mx = std::max(mx, e);
    }
    double z = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (adj(i, j)) z += (alpha(i, j) = std::exp(alpha(i, j) - mx));
    for (Eigen::Index j = 0; j < n; ++j) alpha(i, j) = adj(i, j) ? alpha(i, j) / z : 0.0;
  }
  Mat pre = alpha * V;
  Mat out = pre.cwiseMax(0.0);
  if (cache) *cache = GatCache{H, U, V, alpha, std::move(pre), adj};
  return out;
}

inline Mat gatv2_layer(const Mat& H, const Mat& W, const Vec& a, double slope = 0.2, GatCache* cache = nullptr) {
  return gatv2_layer(H, complete_graph(H.rows()), W, a, slope, cache);
}

/// Returns dH; accumulates dW and da.
inline Mat gatv2_backward(const GatCache& c, const Mat& W, const Vec& a, double slope, const Mat& dOut, Mat& dW,
                          Vec& da) {
  const Eigen::Index n = c.H.rows(), d = c.H.cols(), dp = W.rows();
  const Mat dM = dOut.cwiseProduct((c.pre.array() > 0.0).cast<double>().matrix());
  Mat dV = c.alpha.transpose() * dM;
  const Mat dAlpha = dM * c.V.transpose();
  Mat dU = Mat::Zero(n, dp);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double centre = c.alpha.row(i).dot(dAlpha.row(i));
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!c.adj(i, j)) continue;
      const double de = c.alpha(i, j) * (dAlpha(i, j) - centre);
      const Eigen::ArrayXd s = (c.U.row(i) + c.V.row(j)).transpose().array();
      const Eigen::ArrayXd pos = (s > 0.0).cast<double>();
      const Eigen::ArrayXd slope_v = pos + (1.0 - pos) * slope;
      da += de * (s * slope_v).matrix();
      const Eigen::RowVectorXd ds = (de * a.array() * slope_v).matrix().transpose();
      dU.row(i) += ds;
      dV.row(j) += ds;
    }
  }
  dW.leftCols(d) += dU.transpose() * c.H;
  dW.rightCols(d) += dV.transpose() * c.H;
  return dU * W.leftCols(d) + dV * W.rightCols(d);
}

// ------------------------------------------------------------------- head

struct HeadCache {
  GatCache g1, g2;
  Vec x, a1, h;
  Eigen::Index nodes = 0;
};

/// Logits from encoder embeddings (embed x n), standardized descriptors
/// (n x n_descriptors) and standardized EHR.
inline Vec head_forward(const Model& m, const Mat& E, const Mat& desc, const Vec& ehr, HeadCache* cache = nullptr) {
  const ModelConfig& c = m.config;
  const Params& p = m.params;
  if (ehr.size() != c.n_ehr) throw ArgumentError("forward: EHR length differs from the model's");
  Vec x(c.head_input());
  HeadCache local;
  HeadCache& hc = cache ? *cache : local;
  hc.nodes = E.cols();
  if (c.kind == ModelKind::MultiPatch) {
    if (E.cols() < 1) throw ArgumentError("multi_patch_forward: graph has no nodes");
    if (desc.rows() != E.cols() || desc.cols() != c.n_descriptors)
      throw ArgumentError("multi_patch_forward: descriptor matrix has the wrong shape");
    Mat H0(E.cols(), c.embed + c.n_descriptors);
    H0.leftCols(c.embed) = E.transpose();
    H0.rightCols(c.n_descriptors) = desc;
    const Mat H1 = gatv2_layer(H0, p["gat1.weight"], p["gat1.att"].col(0), c.leaky_slope, &hc.g1);
    const Mat H2 = gatv2_layer(H1, p["gat2.weight"], p["gat2.att"].col(0), c.leaky_slope, &hc.g2);
    x.head(c.graph_width) = H2.colwise().mean().transpose();
    x.tail(c.n_ehr) = ehr;
  } else {
    if (E.cols() != 1) throw ArgumentError("deep_fusion_forward: expects one embedding");
    x.head(c.embed) = E.col(0);
    x.tail(c.n_ehr) = ehr;
  }
  hc.x = x;
  hc.a1 = p["mlp1.weight"] * x + p["mlp1.bias"].col(0);
  hc.h = hc.a1.cwiseMax(0.0);
  return p["mlp2.weight"] * hc.h + p["mlp2.bias"].col(0);
}

/// Returns dE (embed x n); accumulates head gradients.
inline Mat head_backward(const Model& m, const HeadCache& hc, const Vec& df, Tensors& g) {
  const ModelConfig& c = m.config;
  const Params& p = m.params;
  g["mlp2.weight"] += df * hc.h.transpose();
  g["mlp2.bias"] += df;
  const Vec da1 = (p["mlp2.weight"].transpose() * df).cwiseProduct((hc.a1.array() > 0.0).cast<double>().matrix());
  g["mlp1.weight"] += da1 * hc.x.transpose();
  g["mlp1.bias"] += da1;
  const Vec dx = p["mlp1.weight"].transpose() * da1;
  if (c.kind == ModelKind::DeepFusion) return dx.head(c.embed);
  const Eigen::Index n = hc.nodes;
  const Mat dH2 = Mat::Ones(n, 1) * dx.head(c.graph_width).transpose() / static_cast<double>(n);
  Vec da2 = Vec::Zero(c.graph_width), da1g = Vec::Zero(c.graph_width);
  Mat dW2 = Mat::Zero(p["gat2.weight"].rows(), p["gat2.weight"].cols());
  Mat dW1 = Mat::Zero(p["gat1.weight"].rows(), p["gat1.weight"].cols());
  const Mat dH1 = gatv2_backward(hc.g2, p["gat2.weight"], p["gat2.att"].col(0), c.leaky_slope, dH2, dW2, da2);
  const Mat dH0 = gatv2_backward(hc.g1, p["gat1.weight"], p["gat1.att"].col(0), c.leaky_slope, dH1, dW1, da1g);
  g["gat2.weight"] += dW2;
  g["gat2.att"] += da2;
  g["gat1.weight"] += dW1;
  g["gat1.att"] += da1g;
  return dH0.leftCols(c.embed).transpose();
}

// ------------------------------------------------------------------- data

struct TumorGraph {
  std::vector<Volume> patches;
  Mat descriptors;  // n x n_descriptors, raw scale

  std::size_t size() const { return patches.size(); }
};

struct Sample {
  std::string id;
  TumorGraph graph;
  std::optional<Volume> roi_patch;
  Vec ehr;
  double time = 1.0;
  int event = 0;
};

struct Prediction {
  double risk = 0.0;
  Vec logits;
};

namespace detail {

inline Vec standardize(const Vec& v, const Vec& mean, const Vec& scale) {
  return (v - mean).cwiseQuotient(scale);
}

inline Mat standardize_rows(const Mat& m, const Vec& mean, const Vec& scale) {
  Mat out = m.rowwise() - mean.transpose();
  return out.array().rowwise() / scale.transpose().array();
}

struct Prepared {
  std::vector<const Volume*> patches;
  Mat desc;
  Vec ehr;
  double time;
  int event;
};

inline Prepared prepare(const Model& m, const Sample& s) {
  Prepared p;
  if (m.config.kind == ModelKind::DeepFusion) {
    if (!s.roi_patch) throw ArgumentError("deep_fusion: sample " + s.id + " has no RoI patch");
    p.patches = {&*s.roi_patch};
    p.desc = Mat(0, m.config.n_descriptors);
  } else {
    if (s.graph.size() == 0) throw ArgumentError("multi_patch_forward: sample " + s.id + " has no tumours");
    if (static_cast<std::size_t>(s.graph.descriptors.rows()) != s.graph.size())
      throw ArgumentError("multi_patch_forward: descriptor rows differ from patch count");
    for (const Volume& v : s.graph.patches) p.patches.push_back(&v);
    p.desc = standardize_rows(s.graph.descriptors, m.scaling.desc_mean, m.scaling.desc_scale);
  }
  if (s.ehr.size() != m.config.n_ehr) throw ArgumentError("forward: EHR length differs from the model's");
  p.ehr = standardize(s.ehr, m.scaling.ehr_mean, m.scaling.ehr_scale);
  p.time = s.time;
  p.event = s.event;
  return p;
}

}  // namespace detail

/// Mean MTLR loss of a batch. Fills `grad` (same keys as the parameters)
/// when given. `cache` receives the encoder state for running-stat updates.
inline double batch_loss(const Model& m, const std::vector<const Sample*>& batch, bool train, Tensors* grad = nullptr,
                         EncoderCache* cache = nullptr) {
  if (batch.empty()) throw ArgumentError("batch_loss: empty batch");
  std::vector<detail::Prepared> prep;
  std::vector<const Volume*> all;
  std::vector<Eigen::Index> offset;
  for (const Sample* s : batch) {
    prep.push_back(detail::prepare(m, *s));
    offset.push_back(static_cast<Eigen::Index>(all.size()));
    all.insert(all.end(), prep.back().patches.begin(), prep.back().patches.end());
  }
  EncoderCache local;
  EncoderCache& ec = cache ? *cache : local;
  const Mat E = encode(m, all, train, &ec);
  Mat dE = Mat::Zero(E.rows(), E.cols());
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t b = 0; b < prep.size(); ++b) {
    const auto n = static_cast<Eigen::Index>(prep[b].patches.size());
    HeadCache hc;
    const Vec f = head_forward(m, E.middleCols(offset[b], n), prep[b].desc, prep[b].ehr, &hc);
    const MtlrLoss l = mtlr_loss(f, prep[b].time, prep[b].event, m.bins);
    total += l.loss;
    if (grad) dE.middleCols(offset[b], n) += head_backward(m, hc, l.grad * inv_b, *grad);
  }
  if (grad) encode_backward(m, ec, dE, *grad);
  return total * inv_b;
}

inline Prediction predict(const Model& m, const Sample& s) {
  const detail::Prepared p = detail::prepare(m, s);
  const Mat E = encode(m, p.patches, false);
  Prediction out;
  out.logits = head_forward(m, E, p.desc, p.ehr);
  out.risk = mtlr_risk(out.logits, m.bins);
  return out;
}

inline Prediction multi_patch_forward(const Model& m, const TumorGraph& g, const Vec& ehr) {
  if (m.config.kind != ModelKind::MultiPatch) throw ArgumentError("multi_patch_forward: model is not multi-patch");
  Sample s;
  s.graph = g;
  s.ehr = ehr;
  return predict(m, s);
}

inline Prediction deep_fusion_forward(const Model& m, const Volume& patch, const Vec& ehr) {
  if (m.config.kind != ModelKind::DeepFusion) throw ArgumentError("deep_fusion_forward: model is not deep fusion");
  Sample s;
  s.roi_patch = patch;
  s.ehr = ehr;
  return predict(m, s);
}

/// Risks for a cohort; multi-patch patients without tumours get the median
/// risk of the others.
inline std::vector<double> predict_risks(const Model& m, const std::vector<Sample>& cohort) {
  std::vector<double> r(cohort.size(), std::numeric_limits<double>::quiet_NaN());
  std::vector<double> known;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    if (m.config.kind == ModelKind::MultiPatch && cohort[i].graph.size() == 0) continue;
    r[i] = predict(m, cohort[i]).risk;
    known.push_back(r[i]);
  }
  if (known.size() < cohort.size()) {
    if (known.empty()) throw ArgumentError("predict_risks: no patient has a tumour");
    std::sort(known.begin(), known.end());
    const std::size_t h = known.size() / 2;
    const double med = known.size() % 2 ? known[h] : 0.5 * (known[h - 1] + known[h]);
    for (double& v : r)
      if (std::isnan(v)) v = med;
  }
  return r;
}

// --------------------------------------------------------------- training

struct TrainConfig {
  double lr = 0.016;
  std::vector<int> milestones{60, 80};
  double lr_gamma = 0.1;
  int epochs = 100;
  int batch_size = 16;
  std::uint64_t seed = 0;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_cindex = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  Model model;
  std::vector<EpochRecord> history;
  std::size_t excluded = 0;  // training patients without tumours
};

inline double learning_rate(const TrainConfig& cfg, int epoch0) {
  double lr = cfg.lr;
  for (int m : cfg.milestones)
    if (epoch0 >= m) lr *= cfg.lr_gamma;
  return lr;
}

struct Adam {
  Tensors m, v;
  long step = 0;

  void apply(Tensors& w, const Tensors& g, double lr, const TrainConfig& c) {
    if (m.empty()) {
      m = zeros_like(w);
      v = zeros_like(w);
    }
    ++step;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
    for (auto& [k, param] : w) {
      const Mat& gk = g.at(k);
      Mat& mk = m[k];
      Mat& vk = v[k];
      mk = c.beta1 * mk + (1.0 - c.beta1) * gk;
      vk = c.beta2 * vk + (1.0 - c.beta2) * gk.cwiseAbs2();
      param.array() -= lr * (mk.array() / bc1) / ((vk.array() / bc2).sqrt() + c.adam_eps);
    }
  }
};

/// Fits descriptor and EHR standardization on the training samples.
inline InputScaling fit_scaling(const ModelConfig& c, const std::vector<const Sample*>& samples) {
  InputScaling s;
  auto fit = [](const std::vector<Vec>& rows, Eigen::Index d, Vec& mean, Vec& scale) {
    mean = Vec::Zero(d);
    scale = Vec::Ones(d);
    if (rows.empty()) return;
    for (const Vec& r : rows) mean += r;
    mean /= static_cast<double>(rows.size());
    Vec var = Vec::Zero(d);
    for (const Vec& r : rows) var += (r - mean).cwiseAbs2();
    var /= static_cast<double>(rows.size());
    for (Eigen::Index j = 0; j < d; ++j) scale(j) = var(j) > 0 ? std::sqrt(var(j)) : 1.0;
  };
  std::vector<Vec> desc, ehr;
  for (const Sample* p : samples) {
    ehr.push_back(p->ehr);
    for (Eigen::Index i = 0; i < p->graph.descriptors.rows(); ++i) desc.push_back(p->graph.descriptors.row(i).transpose());
  }
  fit(desc, c.n_descriptors, s.desc_mean, s.desc_scale);
  fit(ehr, c.n_ehr, s.ehr_mean, s.ehr_scale);
  return s;
}

/// Minimizes the mean MTLR loss with Adam and a multi-step schedule. Batches
/// follow a seeded per-epoch shuffle, so equal seeds give identical runs.
inline TrainResult train(ModelConfig config, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                         const TimeBins& bins, const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ArgumentError("train: epochs must be >= 1");
  if (!(cfg.lr >= 0.0)) throw ArgumentError("train: learning rate must be non-negative");
  if (cfg.batch_size < 1) throw ArgumentError("train: batch size must be >= 1");
  std::vector<const Sample*> usable;
  TrainResult res;
  for (const Sample& s : train_set) {
    if (config.kind == ModelKind::MultiPatch && s.graph.size() == 0) {
      ++res.excluded;
      continue;
    }
    usable.push_back(&s);
  }
  if (usable.empty()) throw ArgumentError("train: no usable training samples");
  config.K = bins.size();
  config.n_ehr = static_cast<int>(usable.front()->ehr.size());
  res.model = make_model(config, bins, cfg.seed);
  res.model.scaling = fit_scaling(config, usable);
  Model& model = res.model;

  Rng order_rng(cfg.seed ^ 0xa0761d6478bd642fULL);
  Adam adam;
  std::vector<std::size_t> order(usable.size());
  EncoderCache cache;  // conv outputs are reused across batches
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = learning_rate(cfg, epoch);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    int batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_no) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Sample*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(usable[order[i]]);
      Tensors grad = zeros_like(model.params.w);
      const double loss = batch_loss(model, batch, true, &grad, &cache);
      double gmax = 0.0;
      for (const auto& [k, gk] : grad) gmax = std::max(gmax, gk.cwiseAbs().maxCoeff());
      if (!std::isfinite(loss) || !std::isfinite(gmax))
        throw FitError("train: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                       std::to_string(batch_no + 1) + " (loss " + csv::format(loss) + ", max |grad| " +
                       csv::format(gmax) + ")");
      adam.apply(model.params.w, grad, lr, cfg);
      update_running_stats(model, cache);
      loss_sum += loss * static_cast<double>(batch.size());
      seen += batch.size();
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    if (!val_set.empty()) {
      try {
        std::vector<double> t;
        std::vector<int> e;
        for (const Sample& s : val_set) {
          t.push_back(s.time);
          e.push_back(s.event);
        }
        rec.val_cindex = concordance_index(predict_risks(model, val_set), t, e);
      } catch (const Error&) {
      }
    }
    res.history.push_back(rec);
  }
  return res;
}

enum class EnsembleMode { ZScoreMean, RawMean };

/// Averages two risk lists; z-score mode standardizes each list first. A
/// constant list contributes zero in z-score mode and adds a warning.
inline std::vector<double> ensemble_risk(const std::vector<double>& ra, const std::vector<double>& rb,
                                         EnsembleMode mode = EnsembleMode::ZScoreMean,
                                         std::vector<std::string>* warnings = nullptr) {
  if (ra.size() != rb.size()) throw ArgumentError("ensemble_risk: lists differ in length");
  if (ra.size() < 2) throw ArgumentError("ensemble_risk: need at least two patients");
  const std::size_t n = ra.size();
  std::vector<double> out(n);
  if (mode == EnsembleMode::RawMean) {
    for (std::size_t i = 0; i < n; ++i) out[i] = 0.5 * (ra[i] + rb[i]);
    return out;
  }
  auto z = [&](const std::vector<double>& r, const char* name) {
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    std::vector<double> s(n, 0.0);
    if (!(sd > 0.0)) {
      if (warnings) warnings->push_back(std::string("ensemble_risk: ") + name + " has zero variance; contributes 0");
      return s;
    }
    for (std::size_t i = 0; i < n; ++i) s[i] = (r[i] - mean) / sd;
    return s;
  };
  const auto za = z(ra, "first list"), zb = z(rb, "second list");
  for (std::size_t i = 0; i < n; ++i) out[i] = 0.5 * (za[i] + zb[i]);
  return out;
}

// ------------------------------------------------------------ persistence

inline nlohmann::json to_json(const Model& m) {
  using nlohmann::json;
  const ModelConfig& c = m.config;
  json j;
  j["format"] = "progkit-mtlr";
  j["version"] = 1;
  j["config"] = {{"kind", to_string(c.kind)},
                 {"patch", {c.patch.z, c.patch.y, c.patch.x}},
                 {"channels", c.channels},
                 {"embed", c.embed},
                 {"graph_width", c.graph_width},
                 {"hidden", c.hidden},
                 {"n_descriptors", c.n_descriptors},
                 {"n_ehr", c.n_ehr},
                 {"K", c.K},
                 {"leaky_slope", c.leaky_slope},
                 {"batch_norm", c.batch_norm},
                 {"conv_float32", c.conv_float32},
                 {"bn_eps", c.bn_eps},
                 {"bn_momentum", c.bn_momentum}};
  j["bins"] = m.bins.edges;
  j["seed"] = m.seed;
  auto vec = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  j["scaling"] = {{"desc_mean", vec(m.scaling.desc_mean)},
                  {"desc_scale", vec(m.scaling.desc_scale)},
                  {"ehr_mean", vec(m.scaling.ehr_mean)},
                  {"ehr_scale", vec(m.scaling.ehr_scale)}};
  j["buffers"] = {{"running_mean", vec(m.params.running_mean)}, {"running_var", vec(m.params.running_var)}};
  json params = json::object();
  for (const auto& [k, v] : m.params.w) {
    std::vector<double> data(static_cast<std::size_t>(v.size()));
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      for (Eigen::Index col = 0; col < v.cols(); ++col) data[static_cast<std::size_t>(r * v.cols() + col)] = v(r, col);
    params[k] = {{"rows", v.rows()}, {"cols", v.cols()}, {"data", data}};
  }
  j["params"] = params;
  return j;
}

inline Model model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "progkit-mtlr" || j.at("version") != 1) throw FormatError("checkpoint: unsupported format");
    const auto& jc = j.at("config");
    ModelConfig c;
    c.kind = model_kind_from_string(jc.at("kind"));
    const auto pd = jc.at("patch").get<std::vector<std::size_t>>();
    if (pd.size() != 3) throw FormatError("checkpoint: bad patch dims");
    c.patch = Dims{pd[0], pd[1], pd[2]};
    c.channels = jc.at("channels");
    c.embed = jc.at("embed");
    c.graph_width = jc.at("graph_width");
    c.hidden = jc.at("hidden");
    c.n_descriptors = jc.at("n_descriptors");
    c.n_ehr = jc.at("n_ehr");
    c.K = jc.at("K");
    c.leaky_slope = jc.at("leaky_slope");
    c.batch_norm = jc.at("batch_norm");
    c.conv_float32 = jc.at("conv_float32");
    c.bn_eps = jc.at("bn_eps");
    c.bn_momentum = jc.at("bn_momentum");
    Model m = make_model(c, TimeBins(j.at("bins").get<std::vector<double>>()), j.at("seed").get<std::uint64_t>());
    auto vec = [](const nlohmann::json& a) {
      const auto v = a.get<std::vector<double>>();
      return Vec(Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    const auto& s = j.at("scaling");
    m.scaling = {vec(s.at("desc_mean")), vec(s.at("desc_scale")), vec(s.at("ehr_mean")), vec(s.at("ehr_scale"))};
    m.params.running_mean = vec(j.at("buffers").at("running_mean"));
    m.params.running_var = vec(j.at("buffers").at("running_var"));
    for (auto& [k, v] : m.params.w) {
      const auto& jp = j.at("params").at(k);
      if (jp.at("rows") != v.rows() || jp.at("cols") != v.cols()) throw FormatError("checkpoint: shape mismatch for " + k);
      const auto data = jp.at("data").get<std::vector<double>>();
      if (data.size() != static_cast<std::size_t>(v.size())) throw FormatError("checkpoint: size mismatch for " + k);
      for (Eigen::Index r = 0; r < v.rows(); ++r)
        for (Eigen::Index col = 0; col < v.cols(); ++col) v(r, col) = data[static_cast<std::size_t>(r * v.cols() + col)];
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
}

inline void write_training_log(const std::string& path, const std::vector<EpochRecord>& history) {
  csv::Table t;
  t.header = {"epoch", "lr", "train_loss", "val_cindex"};
  for (const auto& r : history)
    t.rows.push_back({std::to_string(r.epoch), csv::format(r.lr), csv::format(r.train_loss),
                      std::isnan(r.val_cindex) ? "" : csv::format(r.val_cindex)});
  csv::write(path, t);
}

}  // namespace progkit::nn
