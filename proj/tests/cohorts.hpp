// Seeded synthetic cohorts with known generating parameters.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "progkit/nn.hpp"
#include "progkit/survival.hpp"

namespace cohorts {

using progkit::CohortTable;
using progkit::Rng;

/// Exponential censoring rate giving roughly `target` censored fraction for
/// the given event times.
inline double censoring_rate(const std::vector<double>& t, double target) {
  auto frac = [&](double rate) {
    double s = 0.0;
    for (double x : t) s += 1.0 - std::exp(-rate * x);
    return s / static_cast<double>(t.size());
  };
  double lo = 0.0, hi = 1.0;
  while (frac(hi) < target) hi *= 2.0;
  for (int i = 0; i < 100; ++i) {
    const double mid = 0.5 * (lo + hi);
    (frac(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

inline void censor(Rng& rng, CohortTable& c, const std::vector<double>& t, double target) {
  c.time.clear();
  c.event.clear();
  if (target <= 0.0) {
    c.time = t;
    c.event.assign(t.size(), 1);
    return;
  }
  const double rate = censoring_rate(t, target);
  for (double ti : t) {
    const double ci = -std::log(1.0 - rng.uniform()) / rate;
    c.time.push_back(std::min(ti, ci));
    c.event.push_back(ti <= ci ? 1 : 0);
  }
}

/// Weibull AFT cohort: log T = b0 + b.x + W / rho with W standard Gumbel-min.
/// Columns x1 (normal), x2 (normal) and optionally a null covariate.
inline CohortTable weibull(std::uint64_t seed, std::size_t n, double b1 = 0.8, double b2 = -0.5, double rho = 1.5,
                           double censored = 0.3, bool null_column = false, double b0 = 3.0) {
  Rng rng(seed);
  CohortTable c;
  c.columns = {"x1", "x2"};
  if (null_column) c.columns.push_back("null");
  c.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c.columns.size()));
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    c.x(r, 0) = rng.normal();
    c.x(r, 1) = rng.normal();
    if (null_column) c.x(r, 2) = rng.normal();
    const double lambda = std::exp(b0 + b1 * c.x(r, 0) + b2 * c.x(r, 1));
    t[i] = lambda * std::pow(-std::log(1.0 - rng.uniform()), 1.0 / rho);
    c.patient_ids.push_back("P" + std::to_string(i));
  }
  censor(rng, c, t, censored);
  return c;
}

/// Two groups with exponential hazards h and hr*h.
inline CohortTable two_group(std::uint64_t seed, std::size_t n, double hr = 2.0, double censored = 0.25) {
  Rng rng(seed);
  CohortTable c;
  c.columns = {"group"};
  c.x.resize(static_cast<Eigen::Index>(n), 1);
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = (i % 2 == 0) ? 1.0 : 0.0;
    c.x(static_cast<Eigen::Index>(i), 0) = g;
    const double h = 0.01 * (g > 0 ? hr : 1.0);
    t[i] = -std::log(1.0 - rng.uniform()) / h;
    c.patient_ids.push_back("G" + std::to_string(i));
  }
  censor(rng, c, t, censored);
  return c;
}

/// Tumour-graph cohort whose event times depend on the mean of descriptor
/// column `signal` over a patient's tumours. Patches are pure noise.
struct Planted {
  std::vector<progkit::nn::Sample> samples;
  CohortTable table;  // EHR columns, then descriptor means
};

inline Planted planted(std::uint64_t seed, std::size_t n, int signal = 4, double strength = 1.5) {
  using namespace progkit;
  Rng rng(seed);
  Planted out;
  out.table.columns = {"ehr_0", "ehr_1", "ehr_2", "desc_0", "desc_1", "desc_2", "desc_3", "desc_4", "desc_5", "desc_6"};
  out.table.x.resize(static_cast<Eigen::Index>(n), 10);
  for (std::size_t i = 0; i < n; ++i) {
    nn::Sample s;
    s.id = "S" + std::to_string(i);
    const int nt = 1 + static_cast<int>(rng.below(3));
    s.graph.descriptors = nn::Mat(nt, 7);
    std::vector<double> mean(7, 0.0);
    for (int k = 0; k < nt; ++k) {
      Volume p(Dims{32, 32, 32}, {1, 1, 1}, {0, 0, 0}, Modality::Fused);
      for (float& x : p.data()) x = static_cast<float>(rng.normal());
      for (int d = 0; d < 7; ++d) {
        s.graph.descriptors(k, d) = rng.normal();
        mean[static_cast<std::size_t>(d)] += s.graph.descriptors(k, d) / nt;
      }
      s.graph.patches.push_back(std::move(p));
    }
    s.ehr = nn::Vec(3);
    for (int d = 0; d < 3; ++d) s.ehr(d) = rng.normal();
    const double t = 100.0 * std::pow(-std::log(1.0 - rng.uniform()), 0.5) *
                     std::exp(-strength * mean[static_cast<std::size_t>(signal)]);
    const double c = rng.uniform(0.0, 300.0);
    s.time = std::min(t, c);
    s.event = t <= c ? 1 : 0;
    const auto r = static_cast<Eigen::Index>(i);
    for (int d = 0; d < 3; ++d) out.table.x(r, d) = s.ehr(d);
    for (int d = 0; d < 7; ++d) out.table.x(r, 3 + d) = mean[static_cast<std::size_t>(d)];
    out.table.patient_ids.push_back(s.id);
    out.table.time.push_back(std::max(s.time, 1e-6));
    out.table.event.push_back(s.event);
    out.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace cohorts
