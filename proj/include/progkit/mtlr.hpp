// Discrete-time survival over K bins (multi-task logistic regression).
//
// A label sequence is monotone: y_j = 0 before the event bin and 1 from it
// on. Sequence m (1..K+1) has its first one at position m; m = K+1 is the
// all-zero sequence (event after the last edge). score(m) = sum_{j>=m} f_j.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "progkit/core.hpp"

namespace progkit {

struct TimeBins {
  std::vector<double> edges;

  TimeBins() = default;
  explicit TimeBins(std::vector<double> e) : edges(std::move(e)) {
    if (edges.empty()) throw ArgumentError("TimeBins: need at least one edge");
    if (!(edges.front() > 0.0)) throw ArgumentError("TimeBins: first edge must be positive");
    for (std::size_t i = 1; i < edges.size(); ++i)
      if (!(edges[i] > edges[i - 1])) throw ArgumentError("TimeBins: edges must be strictly increasing");
  }

  int size() const { return static_cast<int>(edges.size()); }

  /// 1-based bin b with t in (tau_{b-1}, tau_b]; K+1 when t > tau_K.
  int bin_of(double t) const {
    return static_cast<int>(std::lower_bound(edges.begin(), edges.end(), t) - edges.begin()) + 1;
  }
};

inline int default_bin_count(int n_events) {
  if (n_events < 1) throw ArgumentError("default_bin_count: no events");
  return static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_events))));
}

/// Edges at the j/K nearest-rank quantiles of the event times; repeated
/// quantiles are nudged upward by 1e-6 * j.
inline TimeBins make_time_bins(const std::vector<double>& times, const std::vector<int>& events, int K) {
  if (K < 1) throw ArgumentError("make_time_bins: K must be >= 1");
  if (times.size() != events.size()) throw ArgumentError("make_time_bins: times and events differ in length");
  std::vector<double> ev;
  for (std::size_t i = 0; i < times.size(); ++i)
    if (events[i]) ev.push_back(times[i]);
  if (ev.empty()) throw ArgumentError("make_time_bins: no events");
  std::sort(ev.begin(), ev.end());
  const auto n = static_cast<double>(ev.size());
  std::vector<double> edges;
  for (int j = 1; j <= K; ++j) {
    auto rank = static_cast<std::size_t>(std::ceil(static_cast<double>(j) / K * n - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, ev.size());
    double e = ev[rank - 1];
    if (!edges.empty() && e <= edges.back()) e = edges.back() + 1e-6 * j;
    edges.push_back(e);
  }
  return TimeBins(std::move(edges));
}

namespace detail {

// scores[m-1] for m = 1..K+1
inline Eigen::VectorXd sequence_scores(const Eigen::VectorXd& f) {
  const Eigen::Index K = f.size();
  Eigen::VectorXd s(K + 1);
  s(K) = 0.0;
  for (Eigen::Index m = K - 1; m >= 0; --m) s(m) = s(m + 1) + f(m);
  return s;
}

inline double log_sum_exp(const Eigen::VectorXd& v, Eigen::Index from, Eigen::Index to) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = from; i < to; ++i) mx = std::max(mx, v(i));
  double s = 0.0;
  for (Eigen::Index i = from; i < to; ++i) s += std::exp(v(i) - mx);
  return mx + std::log(s);
}

}  // namespace detail

/// Probabilities of the K+1 label sequences, index m-1.
inline Eigen::VectorXd sequence_probabilities(const Eigen::VectorXd& f) {
  const Eigen::VectorXd s = detail::sequence_scores(f);
  const double lz = detail::log_sum_exp(s, 0, s.size());
  return (s.array() - lz).exp();
}

struct MtlrLoss {
  double loss = 0.0;
  Eigen::VectorXd grad;
};

/// Negative log-likelihood of one subject. An event in bin b selects sequence
/// b. A subject censored inside bin b is consistent with the sequences whose
/// first one lies strictly after b.
inline MtlrLoss mtlr_loss(const Eigen::VectorXd& f, double t, int event, const TimeBins& bins) {
  const Eigen::Index K = bins.size();
  if (f.size() != K) throw ArgumentError("mtlr_loss: logit count differs from bin count");
  if (!(t > 0.0)) throw ArgumentError("mtlr_loss: time must be positive");
  if (!f.allFinite()) throw ArgumentError("mtlr_loss: non-finite logits");
  const Eigen::VectorXd s = detail::sequence_scores(f);
  const double lz = detail::log_sum_exp(s, 0, K + 1);
  const Eigen::VectorXd p = (s.array() - lz).exp();

  const Eigen::Index b = bins.bin_of(t);  // 1..K+1
  Eigen::Index lo, hi;                    // consistent sequences m-1 in [lo, hi)
  if (event) {
    lo = b - 1;
    hi = b;
  } else {
    lo = std::min<Eigen::Index>(b, K);
    hi = K + 1;
  }
  const double lc = detail::log_sum_exp(s, lo, hi);
  MtlrLoss out;
  out.loss = lz - lc;
  // d score(m) / d f_j = [m <= j]
  out.grad = Eigen::VectorXd::Zero(K);
  double cum_all = 0.0, cum_c = 0.0;
  for (Eigen::Index j = 0; j < K; ++j) {
    cum_all += p(j);
    if (j >= lo && j < hi) cum_c += std::exp(s(j) - lc);
    out.grad(j) = cum_all - cum_c;
  }
  return out;
}

/// risk = -sum_k S(tau_k), with S(tau_k) the probability of an event after
/// edge k.
inline double mtlr_risk(const Eigen::VectorXd& f, const TimeBins& bins) {
  if (f.size() != bins.size()) throw ArgumentError("mtlr_risk: logit count differs from bin count");
  const Eigen::VectorXd p = sequence_probabilities(f);
  double r = 0.0;
  for (Eigen::Index m = 0; m < p.size(); ++m) r -= static_cast<double>(m) * p(m);
  return r;
}

/// Survival curve S(tau_k), k = 1..K.
inline std::vector<double> mtlr_survival(const Eigen::VectorXd& f) {
  const Eigen::VectorXd p = sequence_probabilities(f);
  std::vector<double> s(static_cast<std::size_t>(f.size()));
  double tail = 0.0;
  for (Eigen::Index m = p.size() - 1; m >= 1; --m) {
    tail += p(m);
    s[static_cast<std::size_t>(m - 1)] = tail;
  }
  return s;
}

}  // namespace progkit
