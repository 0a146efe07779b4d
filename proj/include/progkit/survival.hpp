// Censored survival regression and evaluation.
//
// Weibull AFT: S(t | x) = exp(-(t / lambda)^rho), lambda = exp(b0 + b'x),
// rho = exp(log_rho). Cox PH: partial likelihood with Efron tie handling.
// Both are fitted by damped Newton on internally standardized covariates
// (continuous columns z-scored, columns with <= 3 distinct values left raw)
// and reported on the raw covariate scale.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "progkit/core.hpp"
#include "progkit/csv.hpp"

namespace progkit {

struct CohortTable {
  std::vector<std::string> patient_ids;
  std::vector<std::string> columns;
  Eigen::MatrixXd x;  // patients x covariates; NaN marks a missing cell
  std::vector<double> time;
  std::vector<int> event;

  std::size_t rows() const { return time.size(); }

  bool has_missing() const { return x.size() > 0 && x.hasNaN(); }

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return static_cast<int>(i);
    return -1;
  }

  void validate() const {
    const auto n = time.size();
    if (event.size() != n || patient_ids.size() != n || static_cast<std::size_t>(x.rows()) != n ||
        static_cast<std::size_t>(x.cols()) != columns.size())
      throw ArgumentError("CohortTable: inconsistent sizes");
    std::set<std::string> seen;
    for (const auto& c : columns)
      if (!seen.insert(c).second) throw ArgumentError("CohortTable: duplicate column " + c);
    for (std::size_t i = 0; i < n; ++i) {
      if (!(time[i] > 0.0) || !std::isfinite(time[i])) throw ArgumentError("CohortTable: times must be positive");
      if (event[i] != 0 && event[i] != 1) throw ArgumentError("CohortTable: events must be 0 or 1");
    }
  }

  /// Keeps the named covariate columns, in the given order.
  CohortTable select(const std::vector<std::string>& names) const {
    CohortTable t;
    t.patient_ids = patient_ids;
    t.time = time;
    t.event = event;
    t.columns = names;
    t.x.resize(static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(names.size()));
    for (std::size_t j = 0; j < names.size(); ++j) {
      const int c = column(names[j]);
      if (c < 0) throw ArgumentError("CohortTable: unknown column " + names[j]);
      t.x.col(static_cast<Eigen::Index>(j)) = x.col(c);
    }
    return t;
  }

  CohortTable subset(const std::vector<std::size_t>& idx) const {
    CohortTable t;
    t.columns = columns;
    t.x.resize(static_cast<Eigen::Index>(idx.size()), x.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      t.patient_ids.push_back(patient_ids[idx[r]]);
      t.time.push_back(time[idx[r]]);
      t.event.push_back(event[idx[r]]);
      t.x.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(idx[r]));
    }
    return t;
  }

  std::vector<double> row(std::size_t i) const {
    std::vector<double> r(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index j = 0; j < x.cols(); ++j) r[static_cast<std::size_t>(j)] = x(static_cast<Eigen::Index>(i), j);
    return r;
  }
};

/// Cohort CSV: patient_id, covariates..., time, event. Empty cell = missing.
inline CohortTable read_cohort_csv(const std::string& path) {
  const csv::Table t = csv::read(path);
  const int id_col = t.require("patient_id");
  const int time_col = t.require("time");
  const int event_col = t.require("event");
  CohortTable c;
  std::vector<int> cov;
  for (std::size_t i = 0; i < t.header.size(); ++i) {
    const int ii = static_cast<int>(i);
    if (ii == id_col || ii == time_col || ii == event_col) continue;
    cov.push_back(ii);
    c.columns.push_back(t.header[i]);
  }
  c.x.resize(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(cov.size()));
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string ctx = path + " row " + std::to_string(r + 2);
    c.patient_ids.push_back(row[static_cast<std::size_t>(id_col)]);
    c.time.push_back(csv::to_double(row[static_cast<std::size_t>(time_col)], ctx));
    const double e = csv::to_double(row[static_cast<std::size_t>(event_col)], ctx);
    if (e != 0.0 && e != 1.0) throw IngestionError(ctx + ": event must be 0 or 1");
    c.event.push_back(static_cast<int>(e));
    for (std::size_t j = 0; j < cov.size(); ++j) {
      const std::string& cell = row[static_cast<std::size_t>(cov[j])];
      c.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) =
          cell.empty() ? std::numeric_limits<double>::quiet_NaN() : csv::to_double(cell, ctx);
    }
  }
  try {
    c.validate();
  } catch (const ArgumentError& e) {
    throw IngestionError(path + ": " + e.what());
  }
  return c;
}

inline void write_cohort_csv(const std::string& path, const CohortTable& c) {
  csv::Table t;
  t.header.push_back("patient_id");
  t.header.insert(t.header.end(), c.columns.begin(), c.columns.end());
  t.header.push_back("time");
  t.header.push_back("event");
  for (std::size_t i = 0; i < c.rows(); ++i) {
    std::vector<std::string> r{c.patient_ids[i]};
    for (Eigen::Index j = 0; j < c.x.cols(); ++j) {
      const double v = c.x(static_cast<Eigen::Index>(i), j);
      r.push_back(std::isnan(v) ? "" : csv::format(v));
    }
    r.push_back(csv::format(c.time[i]));
    r.push_back(std::to_string(c.event[i]));
    t.rows.push_back(std::move(r));
  }
  csv::write(path, t);
}

/// Missing cells become -1 (all recorded covariates are non-negative).
inline CohortTable impute_missing(const CohortTable& tbl) {
  CohortTable out = tbl;
  for (Eigen::Index i = 0; i < out.x.rows(); ++i)
    for (Eigen::Index j = 0; j < out.x.cols(); ++j)
      if (std::isnan(out.x(i, j))) out.x(i, j) = -1.0;
  return out;
}

/// Per-column internal scaling: continuous columns are z-scored, binary-like
/// columns (<= 3 distinct values) kept raw, constant columns frozen at zero.
struct ColumnScaling {
  std::vector<double> mean, scale;
  std::vector<bool> continuous, constant;

  static ColumnScaling fit(const Eigen::MatrixXd& x) {
    ColumnScaling s;
    const auto p = static_cast<std::size_t>(x.cols());
    s.mean.assign(p, 0.0);
    s.scale.assign(p, 1.0);
    s.continuous.assign(p, false);
    s.constant.assign(p, false);
    for (std::size_t j = 0; j < p; ++j) {
      const auto col = x.col(static_cast<Eigen::Index>(j));
      std::set<double> distinct(col.data(), col.data() + col.size());
      s.constant[j] = distinct.size() <= 1;
      s.continuous[j] = distinct.size() > 3;
      if (s.continuous[j]) {
        const double m = col.mean();
        const double sd = std::sqrt((col.array() - m).square().mean());
        s.mean[j] = m;
        s.scale[j] = sd > 0.0 ? sd : 1.0;
      }
    }
    return s;
  }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd z = x;
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      z.col(j) = (z.col(j).array() - mean[static_cast<std::size_t>(j)]) / scale[static_cast<std::size_t>(j)];
    return z;
  }
};

struct NewtonOptions {
  double grad_tol = 1e-7;
  int max_iter = 200;
  double armijo = 1e-4;
  int max_halvings = 50;
};

struct NewtonResult {
  Eigen::VectorXd theta;
  double value = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
  int iterations = 0;
  bool converged = false;
};

/// Objective evaluated at theta; returns value and fills gradient/Hessian when
/// the pointers are non-null.
using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*, Eigen::MatrixXd*)>;

/// Damped Newton with Armijo backtracking. Indefinite Hessians are shifted
/// by a growing multiple of the identity until the Cholesky factorization
/// succeeds.
inline NewtonResult newton_minimize(const Objective& f, Eigen::VectorXd theta, const NewtonOptions& opt = {}) {
  NewtonResult r;
  const auto n = theta.size();
  Eigen::VectorXd g(n);
  Eigen::MatrixXd H(n, n);
  double val = f(theta, &g, &H);
  if (!std::isfinite(val)) throw FitError("newton: objective is not finite at the starting point");
  for (r.iterations = 0; r.iterations < opt.max_iter; ++r.iterations) {
    if (n == 0 || g.lpNorm<Eigen::Infinity>() < opt.grad_tol) {
      r.converged = true;
      break;
    }
    Eigen::VectorXd step;
    double shift = 0.0;
    for (int attempt = 0; attempt < 60; ++attempt) {
      Eigen::MatrixXd Hs = H;
      Hs.diagonal().array() += shift;
      Eigen::LLT<Eigen::MatrixXd> llt(Hs);
      if (llt.info() == Eigen::Success) {
        step = -llt.solve(g);
        if (step.allFinite()) break;
      }
      shift = shift == 0.0 ? 1e-8 * std::max(1.0, H.diagonal().cwiseAbs().maxCoeff()) : shift * 10.0;
      step.resize(0);
    }
    if (step.size() == 0) step = -g;
    double slope = g.dot(step);
    if (!(slope < 0)) {
      step = -g;
      slope = -g.squaredNorm();
    }
    double t = 1.0;
    int halvings = 0;
    double cand = 0.0;
    Eigen::VectorXd next;
    for (;;) {
      next = theta + t * step;
      cand = f(next, nullptr, nullptr);
      if (std::isfinite(cand) && cand <= val + opt.armijo * t * slope) break;
      // Near the optimum the decrease drops below the rounding of the objective.
      if (t == 1.0 && std::isfinite(cand) && cand <= val + 1e-12 * (1.0 + std::abs(val))) break;
      if (++halvings > opt.max_halvings) {
        if (std::isfinite(cand) || halvings > opt.max_halvings) {
          // No acceptable decrease: either at numerical optimum or diverging.
          if (g.lpNorm<Eigen::Infinity>() < 1e3 * opt.grad_tol && std::isfinite(val)) {
            r.converged = true;
            r.theta = theta;
            r.value = val;
            r.grad = g;
            r.hess = H;
            return r;
          }
          throw FitError("newton: line search failed after " + std::to_string(opt.max_halvings) + " halvings");
        }
      }
      t *= 0.5;
    }
    theta = next;
    val = f(theta, &g, &H);
  }
  r.theta = theta;
  r.value = val;
  r.grad = g;
  r.hess = H;
  return r;
}

namespace detail {

inline std::string fit_label(const std::vector<std::string>& cols, std::size_t j) {
  return j < cols.size() ? cols[j] : "column " + std::to_string(j);
}

// Inverse of a symmetric positive definite matrix, or nullopt when singular.
inline std::optional<Eigen::MatrixXd> spd_inverse(const Eigen::MatrixXd& H) {
  if (H.size() == 0) return Eigen::MatrixXd(0, 0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
  if (es.info() != Eigen::Success) return std::nullopt;
  const auto& ev = es.eigenvalues();
  if (!(ev.minCoeff() > 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff()))) return std::nullopt;
  return Eigen::MatrixXd(es.eigenvectors() * ev.cwiseInverse().asDiagonal() * es.eigenvectors().transpose());
}

}  // namespace detail

struct WeibullOptions {
  std::optional<double> fixed_rho;
  NewtonOptions newton;
};

struct WeibullAftModel {
  std::vector<std::string> columns;
  Eigen::VectorXd beta;  // raw covariate scale
  double beta0 = 0.0;    // raw-scale intercept
  double log_rho = 0.0;
  bool rho_fixed = false;
  std::vector<bool> fixed;  // frozen (constant) covariates
  /// Covariance of (beta0, beta..., log_rho) on the raw scale.
  Eigen::MatrixXd covariance;
  bool covariance_ok = false;
  ColumnScaling scaling;
  Eigen::VectorXd beta_std;  // standardized-scale coefficients
  double beta0_std = 0.0;
  double log_likelihood = 0.0;
  int iterations = 0;
  double grad_inf_norm = 0.0;

  double rho() const { return std::exp(log_rho); }
  double log_scale(const std::vector<double>& x) const {
    if (x.size() != static_cast<std::size_t>(beta.size())) throw ArgumentError("weibull: covariate dimension mismatch");
    double eta = beta0;
    for (std::size_t j = 0; j < x.size(); ++j) eta += beta(static_cast<Eigen::Index>(j)) * x[j];
    return eta;
  }
  double survival(double t, const std::vector<double>& x) const {
    if (t <= 0.0) return 1.0;
    return std::exp(-std::pow(t / std::exp(log_scale(x)), rho()));
  }
  double median(const std::vector<double>& x) const {
    return std::exp(log_scale(x)) * std::pow(std::log(2.0), 1.0 / rho());
  }
};

/// Negative Weibull log-likelihood on parameters (b0, b..., log_rho) with
/// design matrix `z` (already scaled). Gradient and Hessian are analytic.
inline double weibull_negloglik(const Eigen::MatrixXd& z, const std::vector<double>& t, const std::vector<int>& d,
                                const Eigen::VectorXd& theta, Eigen::VectorXd* grad, Eigen::MatrixXd* hess) {
  const Eigen::Index p = z.cols();
  const double gam = theta(p + 1);
  const double rho = std::exp(gam);
  double ll = 0.0;
  if (grad) grad->setZero(p + 2);
  if (hess) hess->setZero(p + 2, p + 2);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    const double eta = theta(0) + (p > 0 ? z.row(ii).dot(theta.segment(1, p)) : 0.0);
    const double logt = std::log(t[i]);
    const double w = rho * (logt - eta);
    const double e = std::exp(w);
    const double di = d[i];
    ll += di * (gam + w - logt) - e;
    if (!grad && !hess) continue;
    const double l_eta = rho * (e - di);
    const double l_gam = di * (1.0 + w) - w * e;
    const double l_ee = -rho * rho * e;
    const double l_eg = rho * (e - di) + rho * e * w;
    const double l_gg = di * w - w * e * (1.0 + w);
    if (grad) {
      (*grad)(0) -= l_eta;
      if (p > 0) grad->segment(1, p) -= l_eta * z.row(ii).transpose();
      (*grad)(p + 1) -= l_gam;
    }
    if (hess) {
      Eigen::VectorXd xi(p + 1);
      xi(0) = 1.0;
      if (p > 0) xi.tail(p) = z.row(ii).transpose();
      hess->topLeftCorner(p + 1, p + 1) -= l_ee * xi * xi.transpose();
      hess->col(p + 1).head(p + 1) -= l_eg * xi;
      hess->row(p + 1).head(p + 1) -= l_eg * xi.transpose();
      (*hess)(p + 1, p + 1) -= l_gg;
    }
  }
  return -ll;
}

inline WeibullAftModel fit_weibull_aft(const CohortTable& tbl, const WeibullOptions& opt = {}) {
  tbl.validate();
  if (tbl.has_missing()) throw FitError("fit_weibull_aft: table has missing cells (impute first)");
  const double n_events = std::accumulate(tbl.event.begin(), tbl.event.end(), 0.0);
  if (n_events < 1) throw FitError("fit_weibull_aft: no events");

  WeibullAftModel m;
  m.columns = tbl.columns;
  m.scaling = ColumnScaling::fit(tbl.x);
  m.fixed = m.scaling.constant;
  m.rho_fixed = opt.fixed_rho.has_value();
  const Eigen::MatrixXd z = m.scaling.apply(tbl.x);
  const Eigen::Index p = z.cols();

  // Free parameter layout: intercept, non-constant covariates, log_rho.
  std::vector<Eigen::Index> free_idx{0};
  for (Eigen::Index j = 0; j < p; ++j)
    if (!m.fixed[static_cast<std::size_t>(j)]) free_idx.push_back(j + 1);
  if (!m.rho_fixed) free_idx.push_back(p + 1);
  const auto nf = static_cast<Eigen::Index>(free_idx.size());

  Eigen::VectorXd full = Eigen::VectorXd::Zero(p + 2);
  const double total_t = std::accumulate(tbl.time.begin(), tbl.time.end(), 0.0);
  full(0) = std::log(total_t / n_events);
  full(p + 1) = m.rho_fixed ? std::log(*opt.fixed_rho) : 0.0;

  Objective obj = [&](const Eigen::VectorXd& th, Eigen::VectorXd* g, Eigen::MatrixXd* H) {
    Eigen::VectorXd f = full;
    for (Eigen::Index k = 0; k < nf; ++k) f(free_idx[static_cast<std::size_t>(k)]) = th(k);
    Eigen::VectorXd gf;
    Eigen::MatrixXd Hf;
    const double v = weibull_negloglik(z, tbl.time, tbl.event, f, g ? &gf : nullptr, H ? &Hf : nullptr);
    if (g) {
      g->resize(nf);
      for (Eigen::Index k = 0; k < nf; ++k) (*g)(k) = gf(free_idx[static_cast<std::size_t>(k)]);
    }
    if (H) {
      H->resize(nf, nf);
      for (Eigen::Index a = 0; a < nf; ++a)
        for (Eigen::Index b = 0; b < nf; ++b)
          (*H)(a, b) = Hf(free_idx[static_cast<std::size_t>(a)], free_idx[static_cast<std::size_t>(b)]);
    }
    return v;
  };
  Eigen::VectorXd th0(nf);
  for (Eigen::Index k = 0; k < nf; ++k) th0(k) = full(free_idx[static_cast<std::size_t>(k)]);
  const NewtonResult r = newton_minimize(obj, th0, opt.newton);
  if (!r.converged) throw FitError("fit_weibull_aft: did not converge in " + std::to_string(opt.newton.max_iter) + " iterations");
  for (Eigen::Index k = 0; k < nf; ++k) full(free_idx[static_cast<std::size_t>(k)]) = r.theta(k);

  m.log_likelihood = -r.value;
  m.iterations = r.iterations;
  m.grad_inf_norm = r.grad.size() ? r.grad.lpNorm<Eigen::Infinity>() : 0.0;
  m.beta0_std = full(0);
  m.beta_std = full.segment(1, p);
  m.log_rho = full(p + 1);

  // Raw scale: b_raw = b_std / s, b0_raw = b0_std - sum b_std * m / s.
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(p + 2, p + 2);
  for (Eigen::Index j = 0; j < p; ++j) {
    const double s = m.scaling.scale[static_cast<std::size_t>(j)], mu = m.scaling.mean[static_cast<std::size_t>(j)];
    A(j + 1, j + 1) = 1.0 / s;
    A(0, j + 1) = -mu / s;
  }
  const Eigen::VectorXd raw = A * full;
  m.beta0 = raw(0);
  m.beta = raw.segment(1, p);

  Eigen::MatrixXd cov_std = Eigen::MatrixXd::Zero(p + 2, p + 2);
  if (auto inv = detail::spd_inverse(r.hess)) {
    for (Eigen::Index a = 0; a < nf; ++a)
      for (Eigen::Index b = 0; b < nf; ++b)
        cov_std(free_idx[static_cast<std::size_t>(a)], free_idx[static_cast<std::size_t>(b)]) = (*inv)(a, b);
    m.covariance_ok = true;
  }
  m.covariance = A * cov_std * A.transpose();
  return m;
}

struct CoxOptions {
  NewtonOptions newton;
  /// Standardized-scale magnitude beyond which a coefficient is tested for
  /// monotone likelihood.
  double separation_threshold = 10.0;
};

struct CoxModel {
  std::vector<std::string> columns;
  Eigen::VectorXd beta;  // raw scale
  std::vector<bool> fixed;
  Eigen::MatrixXd covariance;  // raw scale
  bool covariance_ok = false;
  ColumnScaling scaling;
  Eigen::VectorXd beta_std;
  double log_partial_likelihood = 0.0;
  int iterations = 0;
  double grad_inf_norm = 0.0;
};

/// Negative Efron log partial likelihood of `beta` for design `z`.
inline double cox_negloglik(const Eigen::MatrixXd& z, const std::vector<double>& t, const std::vector<int>& d,
                            const Eigen::VectorXd& beta, Eigen::VectorXd* grad, Eigen::MatrixXd* hess) {
  const Eigen::Index p = z.cols();
  const std::size_t n = t.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return t[a] > t[b]; });

  const Eigen::VectorXd eta = p > 0 ? Eigen::VectorXd(z * beta) : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  const double shift = n > 0 ? eta.maxCoeff() : 0.0;  // stabilizes exp

  double ll = 0.0;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(p, p);
  double r0 = 0.0;
  Eigen::VectorXd r1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd r2 = Eigen::MatrixXd::Zero(p, p);

  for (std::size_t k = 0; k < n;) {
    std::size_t e = k;
    while (e < n && t[order[e]] == t[order[k]]) ++e;
    // Add the whole tied block to the risk set first.
    double d0 = 0.0;
    Eigen::VectorXd d1 = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd d2 = Eigen::MatrixXd::Zero(p, p);
    int nd = 0;
    for (std::size_t q = k; q < e; ++q) {
      const auto i = static_cast<Eigen::Index>(order[q]);
      const double w = std::exp(eta(i) - shift);
      r0 += w;
      if (p > 0) {
        r1 += w * z.row(i).transpose();
        if (hess) r2 += w * z.row(i).transpose() * z.row(i);
      }
      if (d[order[q]]) {
        ++nd;
        d0 += w;
        ll += eta(i) - shift;
        if (p > 0) {
          g += z.row(i).transpose();
          d1 += w * z.row(i).transpose();
          if (hess) d2 += w * z.row(i).transpose() * z.row(i);
        }
      }
    }
    for (int l = 0; l < nd; ++l) {
      const double frac = static_cast<double>(l) / nd;
      const double phi = r0 - frac * d0;
      ll -= std::log(phi);
      if (p > 0) {
        const Eigen::VectorXd a = (r1 - frac * d1) / phi;
        g -= a;
        if (hess) H -= (r2 - frac * d2) / phi - a * a.transpose();
      }
    }
    k = e;
  }
  if (grad) *grad = -g;
  if (hess) *hess = -H;
  return -ll;
}

inline CoxModel fit_cox_ph(const CohortTable& tbl, const CoxOptions& opt = {}) {
  tbl.validate();
  if (tbl.has_missing()) throw FitError("fit_cox_ph: table has missing cells (impute first)");
  if (std::accumulate(tbl.event.begin(), tbl.event.end(), 0) < 1) throw FitError("fit_cox_ph: no events");
  CoxModel m;
  m.columns = tbl.columns;
  m.scaling = ColumnScaling::fit(tbl.x);
  m.fixed = m.scaling.constant;
  const Eigen::MatrixXd z = m.scaling.apply(tbl.x);
  const Eigen::Index p = z.cols();
  std::vector<Eigen::Index> free_idx;
  for (Eigen::Index j = 0; j < p; ++j)
    if (!m.fixed[static_cast<std::size_t>(j)]) free_idx.push_back(j);
  const auto nf = static_cast<Eigen::Index>(free_idx.size());
  Eigen::MatrixXd zf(z.rows(), nf);
  for (Eigen::Index k = 0; k < nf; ++k) zf.col(k) = z.col(free_idx[static_cast<std::size_t>(k)]);

  Objective obj = [&](const Eigen::VectorXd& b, Eigen::VectorXd* g, Eigen::MatrixXd* H) {
    return cox_negloglik(zf, tbl.time, tbl.event, b, g, H);
  };
  const NewtonResult r = newton_minimize(obj, Eigen::VectorXd::Zero(nf), opt.newton);

  // Monotone likelihood: a huge coefficient whose likelihood still improves
  // when pushed further out.
  for (Eigen::Index k = 0; k < nf; ++k) {
    if (std::abs(r.theta(k)) <= opt.separation_threshold) continue;
    Eigen::VectorXd further = r.theta;
    further(k) += (r.theta(k) > 0 ? 5.0 : -5.0);
    if (obj(further, nullptr, nullptr) <= r.value + 1e-9) {
      const std::string col = detail::fit_label(tbl.columns, static_cast<std::size_t>(free_idx[static_cast<std::size_t>(k)]));
      throw SeparationError(col, "fit_cox_ph: monotone likelihood (perfect separation) in column '" + col + "'");
    }
  }
  if (!r.converged) throw FitError("fit_cox_ph: did not converge in " + std::to_string(opt.newton.max_iter) + " iterations");

  m.iterations = r.iterations;
  m.log_partial_likelihood = -r.value;
  m.grad_inf_norm = nf ? r.grad.lpNorm<Eigen::Infinity>() : 0.0;
  m.beta_std = Eigen::VectorXd::Zero(p);
  for (Eigen::Index k = 0; k < nf; ++k) m.beta_std(free_idx[static_cast<std::size_t>(k)]) = r.theta(k);
  Eigen::VectorXd inv_scale(p);
  for (Eigen::Index j = 0; j < p; ++j) inv_scale(j) = 1.0 / m.scaling.scale[static_cast<std::size_t>(j)];
  m.beta = m.beta_std.cwiseProduct(inv_scale);
  Eigen::MatrixXd cov_std = Eigen::MatrixXd::Zero(p, p);
  if (auto inv = detail::spd_inverse(r.hess)) {
    for (Eigen::Index a = 0; a < nf; ++a)
      for (Eigen::Index b = 0; b < nf; ++b)
        cov_std(free_idx[static_cast<std::size_t>(a)], free_idx[static_cast<std::size_t>(b)]) = (*inv)(a, b);
    m.covariance_ok = true;
  }
  m.covariance = inv_scale.asDiagonal() * cov_std * inv_scale.asDiagonal();
  return m;
}

/// Cox risk: linear predictor b'x.
inline double predict_risk(const CoxModel& m, const std::vector<double>& x) {
  if (x.size() != static_cast<std::size_t>(m.beta.size())) throw ArgumentError("predict_risk: dimension mismatch");
  double r = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) r += m.beta(static_cast<Eigen::Index>(j)) * x[j];
  return r;
}

/// Weibull AFT risk: negative log scale, so longer expected survival means
/// lower risk.
inline double predict_risk(const WeibullAftModel& m, const std::vector<double>& x) { return -m.log_scale(x); }

template <class Model>
std::vector<double> predict_risks(const Model& m, const CohortTable& tbl) {
  std::vector<double> r;
  r.reserve(tbl.rows());
  for (std::size_t i = 0; i < tbl.rows(); ++i) r.push_back(predict_risk(m, tbl.row(i)));
  return r;
}

struct CoefficientRow {
  std::string name;
  double beta = 0.0;
  double se = 0.0;
  double z = 0.0;
  double p = 1.0;
};

namespace detail {

inline std::vector<CoefficientRow> wald_rows(const std::vector<std::string>& names, const Eigen::VectorXd& beta,
                                             const std::vector<bool>& fixed, const Eigen::MatrixXd& cov,
                                             Eigen::Index offset, bool ok) {
  if (!ok) throw FitError("coefficient_significance: singular covariance");
  std::vector<CoefficientRow> rows;
  for (std::size_t j = 0; j < names.size(); ++j) {
    CoefficientRow r;
    r.name = names[j];
    r.beta = beta(static_cast<Eigen::Index>(j));
    if (fixed[j]) {
      r.se = std::numeric_limits<double>::infinity();
      r.z = 0.0;
      r.p = 1.0;
    } else {
      const auto k = static_cast<Eigen::Index>(j) + offset;
      r.se = std::sqrt(cov(k, k));
      r.z = r.beta / r.se;
      r.p = std::erfc(std::abs(r.z) / std::sqrt(2.0));
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace detail

/// Wald z-tests for each covariate, two-sided normal p-values.
inline std::vector<CoefficientRow> coefficient_significance(const WeibullAftModel& m) {
  return detail::wald_rows(m.columns, m.beta, m.fixed, m.covariance, 1, m.covariance_ok);
}
inline std::vector<CoefficientRow> coefficient_significance(const CoxModel& m) {
  return detail::wald_rows(m.columns, m.beta, m.fixed, m.covariance, 0, m.covariance_ok);
}

struct ConcordanceCounts {
  long long concordant = 0;
  long long tied = 0;
  long long comparable = 0;
};

/// Harrell's concordance counts in O(n log n): a pair (i, j) is comparable
/// when t_i < t_j and subject i had the event; concordant when risk_i >
/// risk_j, half credit for tied risks.
inline ConcordanceCounts concordance_counts(const std::vector<double>& risk, const std::vector<double>& t,
                                            const std::vector<int>& event) {
  const std::size_t n = risk.size();
  if (t.size() != n || event.size() != n) throw ArgumentError("concordance_index: inputs must be aligned");
  for (double r : risk)
    if (std::isnan(r)) throw ArgumentError("concordance_index: NaN risk");
  std::vector<double> levels(risk);
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  std::vector<std::size_t> rank(n);
  for (std::size_t i = 0; i < n; ++i)
    rank[i] = static_cast<std::size_t>(std::lower_bound(levels.begin(), levels.end(), risk[i]) - levels.begin()) + 1;

  // Fenwick tree over risk ranks of subjects with strictly later times.
  std::vector<long long> tree(levels.size() + 1, 0);
  auto add = [&](std::size_t i) {
    for (; i < tree.size(); i += i & (~i + 1)) tree[i]++;
  };
  auto prefix = [&](std::size_t i) {
    long long s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree[i];
    return s;
  };
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return t[a] > t[b]; });

  ConcordanceCounts c;
  long long inserted = 0;
  for (std::size_t k = 0; k < n;) {
    std::size_t e = k;
    while (e < n && t[order[e]] == t[order[k]]) ++e;
    for (std::size_t q = k; q < e; ++q) {
      const std::size_t i = order[q];
      if (!event[i]) continue;
      const long long below = prefix(rank[i] - 1);
      const long long same = prefix(rank[i]) - below;
      c.concordant += below;
      c.tied += same;
      c.comparable += inserted;
    }
    for (std::size_t q = k; q < e; ++q) {
      add(rank[order[q]]);
      ++inserted;
    }
    k = e;
  }
  return c;
}

inline double concordance_index(const std::vector<double>& risk, const std::vector<double>& t,
                                const std::vector<int>& event) {
  if (risk.size() < 2) throw ArgumentError("concordance_index: need at least two subjects");
  const auto c = concordance_counts(risk, t, event);
  if (c.comparable == 0) throw UndefinedError("concordance_index: no comparable pairs");
  return (static_cast<double>(c.concordant) + 0.5 * static_cast<double>(c.tied)) / static_cast<double>(c.comparable);
}

enum class SurvivalModelKind { Cox, Weibull };

struct SweepRow {
  std::vector<std::string> subset;
  bool ok = false;
  double c_index = std::numeric_limits<double>::quiet_NaN();
  std::string error;
};

/// One fit per column subset on `train`, scored by validation C-index. Fit
/// failures are recorded on their row and do not abort the sweep.
inline std::vector<SweepRow> calibration_sweep(const CohortTable& train, const CohortTable& validation,
                                               const std::vector<std::vector<std::string>>& feature_sets,
                                               SurvivalModelKind kind) {
  std::vector<SweepRow> out;
  for (const auto& subset : feature_sets) {
    SweepRow row;
    row.subset = subset;
    try {
      const CohortTable tr = impute_missing(train.select(subset));
      const CohortTable va = impute_missing(validation.select(subset));
      std::vector<double> risk;
      if (kind == SurvivalModelKind::Cox) risk = predict_risks(fit_cox_ph(tr), va);
      else risk = predict_risks(fit_weibull_aft(tr), va);
      row.c_index = concordance_index(risk, va.time, va.event);
      row.ok = true;
    } catch (const Error& e) {
      row.error = e.what();
    }
    out.push_back(std::move(row));
  }
  return out;
}

inline nlohmann::json coefficient_json(const std::vector<CoefficientRow>& rows) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : rows)
    a.push_back({{"name", r.name}, {"beta", r.beta}, {"se", std::isfinite(r.se) ? nlohmann::json(r.se) : nlohmann::json()},
                 {"z", r.z}, {"p", r.p}});
  return a;
}

inline nlohmann::json to_json(const WeibullAftModel& m) {
  nlohmann::json j;
  j["model"] = "weibull_aft";
  j["rho"] = m.rho();
  j["log_rho"] = m.log_rho;
  j["rho_fixed"] = m.rho_fixed;
  j["beta0"] = m.beta0;
  j["beta0_standardized"] = m.beta0_std;
  j["coefficients"] = m.covariance_ok ? coefficient_json(coefficient_significance(m)) : nlohmann::json::array();
  j["columns"] = m.columns;
  j["beta"] = std::vector<double>(m.beta.data(), m.beta.data() + m.beta.size());
  j["beta_standardized"] = std::vector<double>(m.beta_std.data(), m.beta_std.data() + m.beta_std.size());
  j["scaling"] = {{"mean", m.scaling.mean}, {"scale", m.scaling.scale}};
  j["convergence"] = {{"log_likelihood", m.log_likelihood}, {"iterations", m.iterations},
                      {"grad_inf_norm", m.grad_inf_norm}, {"covariance_ok", m.covariance_ok}};
  return j;
}

inline nlohmann::json to_json(const CoxModel& m) {
  nlohmann::json j;
  j["model"] = "cox_ph";
  j["ties"] = "efron";
  j["coefficients"] = m.covariance_ok ? coefficient_json(coefficient_significance(m)) : nlohmann::json::array();
  j["columns"] = m.columns;
  j["beta"] = std::vector<double>(m.beta.data(), m.beta.data() + m.beta.size());
  j["convergence"] = {{"log_partial_likelihood", m.log_partial_likelihood}, {"iterations", m.iterations},
                      {"grad_inf_norm", m.grad_inf_norm}, {"covariance_ok", m.covariance_ok}};
  return j;
}

}  // namespace progkit
