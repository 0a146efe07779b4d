// Tumour typing: RBF-kernel SVM trained by SMO, one-vs-one for multiple
// classes, plus relabelling of binary segmentations and F1 scoring.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "progkit/core.hpp"
#include "progkit/morphology.hpp"
#include "progkit/volume.hpp"

namespace progkit {

/// Semantic classes produced by the relabelling stage.
enum TumourClass : int { kBackground = 0, kGTVp = 1, kGTVn = 2 };

enum class GammaMode { Scale, Fixed };

struct SvmOptions {
  double C = 1.0;
  GammaMode gamma_mode = GammaMode::Scale;
  double gamma = 0.0;  // used when gamma_mode == Fixed
  bool standardize = true;
  double tolerance = 1e-3;
  long max_iterations = 1'000'000;
  std::uint64_t seed = 0;
};

struct BinaryMachine {
  int class_a = 0;  // predicted when decision > 0
  int class_b = 0;
  std::vector<std::vector<double>> support;  // standardized feature vectors
  std::vector<double> coef;                  // alpha_i * y_i
  double bias = 0.0;
};

struct SvmModel {
  std::vector<int> classes;  // ascending
  std::size_t dim = 0;
  double gamma = 1.0;
  double C = 1.0;
  bool standardize = true;
  std::vector<double> mean, scale;
  std::vector<BinaryMachine> machines;
  std::uint64_t seed = 0;
};

struct SmoResult {
  std::vector<double> alpha;
  double rho = 0.0;  // decision f(x) = sum alpha_j y_j K(x_j, x) - rho
  long iterations = 0;
  double max_violation = 0.0;
  bool converged = false;
};

inline double rbf_kernel(const std::vector<double>& u, const std::vector<double>& v, double gamma) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double d = u[i] - v[i];
    d2 += d * d;
  }
  return std::exp(-gamma * d2);
}

/// Two-variable SMO on the C-SVC dual with maximal-violating-pair working set
/// selection. `K` is the full kernel matrix, `y` holds +1/-1.
inline SmoResult smo_solve(const std::vector<std::vector<double>>& K, const std::vector<int>& y, double C,
                           double tol, long max_iter) {
  const std::size_t n = y.size();
  SmoResult r;
  r.alpha.assign(n, 0.0);
  std::vector<double> G(n, -1.0);  // gradient of 1/2 a'Qa - e'a
  auto Q = [&](std::size_t i, std::size_t j) { return y[i] * y[j] * K[i][j]; };
  auto in_up = [&](std::size_t t) { return (y[t] > 0 && r.alpha[t] < C) || (y[t] < 0 && r.alpha[t] > 0); };
  auto in_low = [&](std::size_t t) { return (y[t] > 0 && r.alpha[t] > 0) || (y[t] < 0 && r.alpha[t] < C); };
  constexpr double kTau = 1e-12;

  for (r.iterations = 0; r.iterations < max_iter; ++r.iterations) {
    double m = -std::numeric_limits<double>::infinity(), M = std::numeric_limits<double>::infinity();
    std::size_t i = n, j = n;
    for (std::size_t t = 0; t < n; ++t) {
      const double v = -y[t] * G[t];
      if (in_up(t) && v > m) {
        m = v;
        i = t;
      }
      if (in_low(t) && v < M) {
        M = v;
        j = t;
      }
    }
    r.max_violation = m - M;
    if (i == n || j == n || m - M < tol) {
      r.converged = true;
      break;
    }
    const double ai = r.alpha[i], aj = r.alpha[j];
    if (y[i] != y[j]) {
      double quad = K[i][i] + K[j][j] - 2.0 * K[i][j];
      if (quad <= 0) quad = kTau;
      const double delta = (-G[i] - G[j]) / quad;
      const double diff = r.alpha[i] - r.alpha[j];
      r.alpha[i] += delta;
      r.alpha[j] += delta;
      if (diff > 0) {
        if (r.alpha[j] < 0) { r.alpha[j] = 0; r.alpha[i] = diff; }
      } else {
        if (r.alpha[i] < 0) { r.alpha[i] = 0; r.alpha[j] = -diff; }
      }
      if (diff > 0) {
        if (r.alpha[i] > C) { r.alpha[i] = C; r.alpha[j] = C - diff; }
      } else {
        if (r.alpha[j] > C) { r.alpha[j] = C; r.alpha[i] = C + diff; }
      }
    } else {
      double quad = K[i][i] + K[j][j] - 2.0 * K[i][j];
      if (quad <= 0) quad = kTau;
      const double delta = (G[i] - G[j]) / quad;
      const double sum = r.alpha[i] + r.alpha[j];
      r.alpha[i] -= delta;
      r.alpha[j] += delta;
      if (sum > C) {
        if (r.alpha[i] > C) { r.alpha[i] = C; r.alpha[j] = sum - C; }
      } else {
        if (r.alpha[j] < 0) { r.alpha[j] = 0; r.alpha[i] = sum; }
      }
      if (sum > C) {
        if (r.alpha[j] > C) { r.alpha[j] = C; r.alpha[i] = sum - C; }
      } else {
        if (r.alpha[i] < 0) { r.alpha[i] = 0; r.alpha[j] = sum; }
      }
    }
    const double di = r.alpha[i] - ai, dj = r.alpha[j] - aj;
    for (std::size_t t = 0; t < n; ++t) G[t] += Q(i, t) * di + Q(j, t) * dj;
  }

  // Offset from free vectors, or the midpoint of the feasible interval.
  double sum = 0.0;
  int nfree = 0;
  double ub = std::numeric_limits<double>::infinity(), lb = -ub;
  for (std::size_t t = 0; t < n; ++t) {
    const double yg = y[t] * G[t];
    if (r.alpha[t] > 0 && r.alpha[t] < C) {
      sum += yg;
      ++nfree;
    } else if ((r.alpha[t] >= C && y[t] < 0) || (r.alpha[t] <= 0 && y[t] > 0)) {
      ub = std::min(ub, yg);
    } else {
      lb = std::max(lb, yg);
    }
  }
  r.rho = nfree > 0 ? sum / nfree : (ub + lb) / 2.0;
  return r;
}

namespace detail {

inline std::vector<double> standardize_row(const SvmModel& m, const std::vector<double>& x) {
  std::vector<double> z(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) z[i] = m.standardize ? (x[i] - m.mean[i]) / m.scale[i] : x[i];
  return z;
}

}  // namespace detail

inline SvmModel svm_train(const std::vector<std::vector<double>>& X, const std::vector<int>& y,
                          const SvmOptions& opt = {}) {
  if (X.empty() || X.size() != y.size()) throw ArgumentError("svm_train: X and y must be non-empty and aligned");
  if (!(opt.C > 0.0)) throw ArgumentError("svm_train: C must be positive");
  const std::size_t d = X.front().size();
  for (const auto& row : X) {
    if (row.size() != d) throw ArgumentError("svm_train: inconsistent feature dimension");
    for (double v : row)
      if (!std::isfinite(v)) throw ArgumentError("svm_train: non-finite feature value");
  }
  std::set<int> cls(y.begin(), y.end());
  if (cls.size() < 2) throw ArgumentError("svm_train: need at least two distinct classes");

  SvmModel m;
  m.classes.assign(cls.begin(), cls.end());
  m.dim = d;
  m.C = opt.C;
  m.standardize = opt.standardize;
  m.seed = opt.seed;
  m.mean.assign(d, 0.0);
  m.scale.assign(d, 1.0);
  if (opt.standardize) {
    for (const auto& row : X)
      for (std::size_t k = 0; k < d; ++k) m.mean[k] += row[k];
    for (double& v : m.mean) v /= static_cast<double>(X.size());
    std::vector<double> var(d, 0.0);
    for (const auto& row : X)
      for (std::size_t k = 0; k < d; ++k) var[k] += (row[k] - m.mean[k]) * (row[k] - m.mean[k]);
    for (std::size_t k = 0; k < d; ++k) {
      const double sd = std::sqrt(var[k] / static_cast<double>(X.size()));
      m.scale[k] = sd > 0.0 ? sd : 1.0;
    }
  }
  std::vector<std::vector<double>> Z;
  Z.reserve(X.size());
  for (const auto& row : X) Z.push_back(detail::standardize_row(m, row));

  if (opt.gamma_mode == GammaMode::Fixed) {
    if (!(opt.gamma > 0.0)) throw ArgumentError("svm_train: fixed gamma must be positive");
    m.gamma = opt.gamma;
  } else {
    double s = 0.0, s2 = 0.0;
    for (const auto& row : Z)
      for (double v : row) {
        s += v;
        s2 += v * v;
      }
    const double cnt = static_cast<double>(Z.size() * d);
    const double var = s2 / cnt - (s / cnt) * (s / cnt);
    m.gamma = var > 0.0 ? 1.0 / (static_cast<double>(d) * var) : 1.0;
  }

  for (std::size_t a = 0; a < m.classes.size(); ++a)
    for (std::size_t b = a + 1; b < m.classes.size(); ++b) {
      std::vector<std::size_t> idx;
      std::vector<int> yy;
      for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] == m.classes[a]) { idx.push_back(i); yy.push_back(+1); }
        else if (y[i] == m.classes[b]) { idx.push_back(i); yy.push_back(-1); }
      }
      std::vector<std::vector<double>> K(idx.size(), std::vector<double>(idx.size()));
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = i; j < idx.size(); ++j) K[i][j] = K[j][i] = rbf_kernel(Z[idx[i]], Z[idx[j]], m.gamma);
      const SmoResult r = smo_solve(K, yy, opt.C, opt.tolerance, opt.max_iterations);
      BinaryMachine bm;
      bm.class_a = m.classes[a];
      bm.class_b = m.classes[b];
      bm.bias = -r.rho;
      for (std::size_t i = 0; i < idx.size(); ++i)
        if (r.alpha[i] > 0.0) {
          bm.support.push_back(Z[idx[i]]);
          bm.coef.push_back(r.alpha[i] * yy[i]);
        }
      m.machines.push_back(std::move(bm));
    }
  return m;
}

inline double decision_value(const SvmModel& m, const BinaryMachine& bm, const std::vector<double>& z) {
  double f = bm.bias;
  for (std::size_t i = 0; i < bm.support.size(); ++i) f += bm.coef[i] * rbf_kernel(bm.support[i], z, m.gamma);
  return f;
}

/// Pairwise majority vote. Ties go to the larger summed |decision| of the
/// votes won, then to the lowest class. A decision of exactly zero casts no
/// vote.
inline int svm_predict(const SvmModel& m, const std::vector<double>& x) {
  if (x.size() != m.dim) throw ArgumentError("svm_predict: feature dimension mismatch");
  const auto z = detail::standardize_row(m, x);
  std::map<int, std::pair<int, double>> tally;
  for (int c : m.classes) tally[c] = {0, 0.0};
  for (const auto& bm : m.machines) {
    const double f = decision_value(m, bm, z);
    if (f > 0) { tally[bm.class_a].first++; tally[bm.class_a].second += f; }
    else if (f < 0) { tally[bm.class_b].first++; tally[bm.class_b].second -= f; }
  }
  int best = m.classes.front();
  for (int c : m.classes) {
    const auto& t = tally[c];
    const auto& b = tally[best];
    if (t.first > b.first || (t.first == b.first && t.second > b.second)) best = c;
  }
  return best;
}

inline nlohmann::json to_json(const SvmModel& m) {
  nlohmann::json j;
  j["format"] = "progkit-svm";
  j["version"] = 1;
  j["classes"] = m.classes;
  j["dim"] = m.dim;
  j["kernel"] = {{"type", "rbf"}, {"gamma", m.gamma}};
  j["C"] = m.C;
  j["seed"] = m.seed;
  j["standardize"] = m.standardize;
  j["mean"] = m.mean;
  j["scale"] = m.scale;
  j["machines"] = nlohmann::json::array();
  for (const auto& bm : m.machines)
    j["machines"].push_back(
        {{"class_a", bm.class_a}, {"class_b", bm.class_b}, {"bias", bm.bias}, {"coef", bm.coef}, {"support", bm.support}});
  return j;
}

inline SvmModel svm_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "progkit-svm") throw FormatError("svm model: unknown format");
  if (j.value("version", 0) != 1) throw UnsupportedError("svm model: unsupported version");
  SvmModel m;
  m.classes = j.at("classes").get<std::vector<int>>();
  m.dim = j.at("dim").get<std::size_t>();
  m.gamma = j.at("kernel").at("gamma").get<double>();
  m.C = j.at("C").get<double>();
  m.seed = j.value("seed", std::uint64_t{0});
  m.standardize = j.at("standardize").get<bool>();
  m.mean = j.at("mean").get<std::vector<double>>();
  m.scale = j.at("scale").get<std::vector<double>>();
  for (const auto& jm : j.at("machines")) {
    BinaryMachine bm;
    bm.class_a = jm.at("class_a").get<int>();
    bm.class_b = jm.at("class_b").get<int>();
    bm.bias = jm.at("bias").get<double>();
    bm.coef = jm.at("coef").get<std::vector<double>>();
    bm.support = jm.at("support").get<std::vector<std::vector<double>>>();
    m.machines.push_back(std::move(bm));
  }
  return m;
}

/// Training labels for predicted components from a semantic ground truth:
/// background when less than `min_overlap` of the component overlaps any
/// tumour, otherwise the majority tumour class (GTVp on ties).
inline std::vector<int> component_truth_labels(const LabelMap& lm, const Volume& truth, double min_overlap = 0.1) {
  if (!(truth.dims() == lm.dims)) throw ArgumentError("component_truth_labels: grid mismatch");
  std::vector<std::array<long, 3>> counts(static_cast<std::size_t>(lm.count), {0, 0, 0});
  auto t = truth.data();
  for (std::size_t i = 0; i < lm.labels.size(); ++i) {
    const auto l = lm.labels[i];
    if (l <= 0) continue;
    auto& c = counts[static_cast<std::size_t>(l - 1)];
    c[0]++;
    if (t[i] == 1.0f) c[1]++;
    else if (t[i] == 2.0f) c[2]++;
  }
  std::vector<int> out;
  for (const auto& c : counts) {
    const double frac = static_cast<double>(c[1] + c[2]) / static_cast<double>(c[0]);
    if (frac < min_overlap) out.push_back(kBackground);
    else out.push_back(c[2] > c[1] ? kGTVn : kGTVp);
  }
  return out;
}

/// Sets every component of `lm` to its predicted class (0 erases it).
inline Volume relabel_segmentation(const Volume& binary_mask, const LabelMap& lm, const SvmModel& m, const Volume& ct,
                                   const Volume& pet) {
  if (!(binary_mask.dims() == lm.dims)) throw ArgumentError("relabel_segmentation: grid mismatch");
  Volume out(binary_mask.dims(), binary_mask.spacing(), binary_mask.origin(), Modality::Mask);
  if (lm.count == 0) return out;
  const auto feats = all_region_descriptors(lm, ct, pet);
  std::vector<int> cls;
  for (const auto& f : feats) cls.push_back(svm_predict(m, f.to_vector()));
  auto o = out.data();
  for (std::size_t i = 0; i < lm.labels.size(); ++i)
    if (lm.labels[i] > 0) o[i] = static_cast<float>(cls[static_cast<std::size_t>(lm.labels[i] - 1)]);
  return out;
}

struct F1Scores {
  double macro_f1 = 0.0;
  double micro_f1 = 0.0;
};

/// Macro F1 averages per-class F1 over classes present in either list;
/// micro F1 pools TP/FP/FN over those classes.
inline F1Scores f1_scores(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.empty() || pred.size() != truth.size()) throw ArgumentError("f1_scores: inputs must be non-empty and aligned");
  std::set<int> cls(pred.begin(), pred.end());
  cls.insert(truth.begin(), truth.end());
  long tp_all = 0, fp_all = 0, fn_all = 0;
  // Per-class F1 values are summed as exact fractions until the common
  // denominator passes 2^53, then in floating point.
  long long num = 0, den = 1;
  bool exact = true;
  double macro = 0.0;
  for (int c : cls) {
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == c && truth[i] == c) ++tp;
      else if (pred[i] == c) ++fp;
      else if (truth[i] == c) ++fn;
    }
    const long long a = 2 * tp, b = 2 * tp + fp + fn;
    macro += static_cast<double>(a) / static_cast<double>(b);
    if (exact) {
      const long long g = std::gcd(den, b);
      const long long l = den / g * b;
      if (l > (1LL << 53) / static_cast<long long>(cls.size())) {
        exact = false;
      } else {
        num = num * (l / den) + a * (l / b);
        den = l;
        const long long r = std::gcd(num, den);
        num /= r;
        den /= r;
      }
    }
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
  }
  F1Scores s;
  s.macro_f1 = exact ? static_cast<double>(num) / static_cast<double>(den * static_cast<long long>(cls.size()))
                     : macro / static_cast<double>(cls.size());
  s.micro_f1 = 2.0 * tp_all / static_cast<double>(2 * tp_all + fp_all + fn_all);
  return s;
}

}  // namespace progkit
