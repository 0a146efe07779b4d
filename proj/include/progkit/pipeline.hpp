// Cohort splitting, segmentation scoring, synthetic cohorts and the
// end-to-end pipeline driver.
#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "progkit/classifier.hpp"
#include "progkit/core.hpp"
#include "progkit/csv.hpp"
#include "progkit/localizer.hpp"
#include "progkit/morphology.hpp"
#include "progkit/nifti.hpp"
#include "progkit/nn.hpp"
#include "progkit/survival.hpp"
#include "progkit/volume.hpp"

namespace progkit {

// ------------------------------------------------------------------ split

struct SplitAssignment {
  std::vector<std::string> ids;  // input order
  std::map<std::string, std::string> split;   // "train" | "validation"
  std::map<std::string, std::string> centre;

  std::vector<std::string> members(const std::string& which) const {
    std::vector<std::string> out;
    for (const auto& id : ids)
      if (split.at(id) == which) out.push_back(id);
    return out;
  }
  std::vector<std::string> train() const { return members("train"); }
  std::vector<std::string> validation() const { return members("validation"); }
};

/// Centre code: the part of the id before the first '-'.
inline std::string centre_of(const std::string& id) {
  const auto dash = id.find('-');
  if (id.empty() || dash == std::string::npos || dash == 0 || dash + 1 == id.size())
    throw IngestionError("malformed patient id '" + id + "'");
  return id.substr(0, dash);
}

/// Per-centre shuffled allocation. Validation counts per centre are the
/// largest-remainder apportionment of round(val_frac * n), so every centre
/// is within one patient of its exact share.
inline SplitAssignment split_cohort(const std::vector<std::string>& ids, std::uint64_t seed, double val_frac) {
  if (ids.empty()) throw ArgumentError("split_cohort: no patient ids");
  if (!(val_frac > 0.0 && val_frac < 1.0)) throw ArgumentError("split_cohort: val_frac must lie in (0, 1)");
  std::vector<std::string> bad;
  std::map<std::string, std::vector<std::string>> by_centre;
  std::set<std::string> seen;
  for (const auto& id : ids) {
    const auto dash = id.find('-');
    if (id.empty() || dash == std::string::npos || dash == 0 || dash + 1 == id.size()) {
      bad.push_back("'" + id + "'");
      continue;
    }
    if (!seen.insert(id).second) {
      bad.push_back("'" + id + "' (duplicate)");
      continue;
    }
    by_centre[id.substr(0, dash)].push_back(id);
  }
  if (!bad.empty()) {
    std::string msg = "split_cohort: malformed patient ids:";
    for (const auto& b : bad) msg += " " + b;
    throw IngestionError(msg);
  }
  const auto n = static_cast<double>(ids.size());
  const auto total_val = static_cast<long>(std::llround(val_frac * n));
  struct Share {
    std::string centre;
    long count;
    double remainder;
  };
  std::vector<Share> shares;
  long assigned = 0;
  for (const auto& [c, members] : by_centre) {
    const double exact = val_frac * static_cast<double>(members.size());
    const auto fl = static_cast<long>(std::floor(exact));
    shares.push_back({c, fl, exact - static_cast<double>(fl)});
    assigned += fl;
  }
  std::vector<std::size_t> order(shares.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return shares[a].remainder > shares[b].remainder; });
  for (std::size_t k = 0; assigned < total_val && k < order.size(); ++k, ++assigned) shares[order[k]].count++;

  SplitAssignment out;
  out.ids = ids;
  Rng rng(seed);
  for (const Share& s : shares) {
    auto members = by_centre[s.centre];
    std::sort(members.begin(), members.end());
    rng.shuffle(members);
    for (std::size_t i = 0; i < members.size(); ++i) {
      out.split[members[i]] = static_cast<long>(i) < s.count ? "validation" : "train";
      out.centre[members[i]] = s.centre;
    }
  }
  return out;
}

// ------------------------------------------------------ segmentation score

struct SegmentationScores {
  double dice_gtvp = 1.0;
  double dice_gtvn = 1.0;
  double aggregated = 1.0;
  std::array<long long, 3> intersection{}, pred_voxels{}, truth_voxels{};
};

/// Cohort-level Dice per class: 2 * sum |P & G| / sum (|P| + |G|); a class
/// absent from both predictions and truth scores 1.
inline SegmentationScores evaluate_segmentation(const std::vector<const Volume*>& pred,
                                                const std::vector<const Volume*>& truth) {
  if (pred.size() != truth.size()) throw ArgumentError("evaluate_segmentation: list lengths differ");
  SegmentationScores s;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Dims a = pred[i]->dims(), b = truth[i]->dims();
    if (a.z != b.z || a.y != b.y || a.x != b.x)
      throw ArgumentError("evaluate_segmentation: shape mismatch for case " + std::to_string(i));
    const auto p = pred[i]->data();
    const auto t = truth[i]->data();
    for (std::size_t v = 0; v < p.size(); ++v) {
      const int pc = static_cast<int>(p[v]), tc = static_cast<int>(t[v]);
      if (pc < 0 || pc > 2 || tc < 0 || tc > 2 || static_cast<float>(pc) != p[v] || static_cast<float>(tc) != t[v])
        throw ArgumentError("evaluate_segmentation: labels must be 0, 1 or 2");
      s.pred_voxels[static_cast<std::size_t>(pc)]++;
      s.truth_voxels[static_cast<std::size_t>(tc)]++;
      if (pc == tc) s.intersection[static_cast<std::size_t>(pc)]++;
    }
  }
  auto dice = [&](int c) {
    const auto k = static_cast<std::size_t>(c);
    const long long denom = s.pred_voxels[k] + s.truth_voxels[k];
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(s.intersection[k]) / static_cast<double>(denom);
  };
  s.dice_gtvp = dice(1);
  s.dice_gtvn = dice(2);
  s.aggregated = 0.5 * (s.dice_gtvp + s.dice_gtvn);
  return s;
}

inline SegmentationScores evaluate_segmentation(const std::vector<Volume>& pred, const std::vector<Volume>& truth) {
  std::vector<const Volume*> p, t;
  for (const auto& v : pred) p.push_back(&v);
  for (const auto& v : truth) t.push_back(&v);
  return evaluate_segmentation(p, t);
}

// -------------------------------------------------------- parallel helper

/// Runs f(i) for i in [0, n) on up to `workers` threads. Results land by
/// index; the first failure (lowest index) is rethrown after all finish.
template <class R>
std::vector<R> parallel_map(std::size_t n, int workers, const std::function<R(std::size_t)>& f) {
  std::vector<R> out(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        out[i] = f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto w = static_cast<std::size_t>(std::max(1, workers));
  if (w == 1 || n <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < std::min(w, n); ++k) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

inline int default_workers() {
  const unsigned h = std::thread::hardware_concurrency();
  return h == 0 ? 1 : static_cast<int>(h);
}

// ------------------------------------------------------- synthetic cohort

struct SyntheticSpec {
  int n_patients = 20;
  double censoring_rate = 0.3;
  Vec3 spacing{5.0, 5.0, 5.0};
  Dims dims{180, 56, 64};
  double weibull_rho = 1.5;
  double log_scale = std::log(1500.0);  // days
  double beta_pet = 0.8;   // log-time decrease per SD of mean tumour uptake
  double beta_age = 0.2;   // per SD of age
  double beta_hpv = -0.4;  // HPV-positive patients live longer
  double missing_rate = 0.05;
  int fp_blobs_max = 2;
  std::vector<std::string> centres{"CHUM", "CHUP", "CHUS", "HGJ", "HMR", "MDA"};
};

struct SyntheticPatient {
  std::string id;
  Volume ct, pet, truth, pred;
  std::vector<double> ehr;  // NaN when missing
  double time = 0.0;
  int event = 1;
  nlohmann::json params;
};

struct SyntheticCohort {
  std::vector<SyntheticPatient> patients;
  std::vector<std::string> ehr_columns;
  nlohmann::json ground_truth;

  CohortTable table() const {
    CohortTable t;
    t.columns = ehr_columns;
    t.x.resize(static_cast<Eigen::Index>(patients.size()), static_cast<Eigen::Index>(ehr_columns.size()));
    for (std::size_t i = 0; i < patients.size(); ++i) {
      t.patient_ids.push_back(patients[i].id);
      t.time.push_back(patients[i].time);
      t.event.push_back(patients[i].event);
      for (std::size_t j = 0; j < ehr_columns.size(); ++j)
        t.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = patients[i].ehr[j];
    }
    return t;
  }
};

inline const std::vector<std::string>& ehr_column_names() {
  static const std::vector<std::string> n = {"age",      "alcohol", "tobacco", "hpv",   "performance",
                                             "surgery", "chemotherapy", "gender", "weight"};
  return n;
}

/// Independent exponential censoring whose rate is tuned by bisection so the
/// realized censored fraction matches `rate` as closely as possible.
inline void apply_censoring(std::vector<double>& time, std::vector<int>& event, double rate, Rng& rng) {
  const std::size_t n = time.size();
  event.assign(n, 1);
  if (!(rate > 0.0)) return;
  std::vector<double> e(n);
  for (double& v : e) v = -std::log(1.0 - rng.uniform());
  const auto target = static_cast<long>(std::llround(rate * static_cast<double>(n)));
  auto censored = [&](double lam) {
    long c = 0;
    for (std::size_t i = 0; i < n; ++i) c += (e[i] / lam < time[i]);
    return c;
  };
  double lo = -30.0, hi = 10.0;  // log rate
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (censored(std::exp(mid)) < target) lo = mid;
    else hi = mid;
  }
  const double lam = std::exp(hi);
  for (std::size_t i = 0; i < n; ++i) {
    const double c = e[i] / lam;
    if (c < time[i]) {
      time[i] = c;
      event[i] = 0;
    }
  }
}

namespace detail {

struct Ellipsoid {
  Vec3 centre, radii;  // mm, (z, y, x)
  bool inside(const Vec3& p) const {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) s += std::pow((p[a] - centre[a]) / radii[a], 2);
    return s <= 1.0;
  }
};

inline nlohmann::json to_json(const Ellipsoid& e) {
  return {{"centre_mm", {e.centre[0], e.centre[1], e.centre[2]}}, {"radii_mm", {e.radii[0], e.radii[1], e.radii[2]}}};
}

}  // namespace detail

/// Whole-body phantoms: PET-bright brain inside the head, narrow neck, wide
/// torso, PET-bright bladder far inferior, 1-3 ellipsoidal tumours in the
/// neck (first GTVp, then GTVn) and false-positive blobs in the predicted
/// masks. Survival follows a Weibull AFT model of mean tumour uptake, age
/// and HPV status.
inline SyntheticCohort make_synthetic_cohort(std::uint64_t seed, const SyntheticSpec& spec) {
  if (spec.n_patients < 1) throw ArgumentError("make_synthetic_cohort: need at least one patient");
  if (spec.centres.empty()) throw ArgumentError("make_synthetic_cohort: no centres");
  Rng rng(seed);
  SyntheticCohort cohort;
  cohort.ehr_columns = ehr_column_names();
  const Dims d = spec.dims;
  const Vec3 sp = spec.spacing;
  const double cy = 0.5 * (static_cast<double>(d.y) - 1.0) * sp[1];
  const double cx = 0.5 * (static_cast<double>(d.x) - 1.0) * sp[2];
  std::vector<double> true_time;
  std::map<std::string, int> per_centre;

  for (int i = 0; i < spec.n_patients; ++i) {
    SyntheticPatient p;
    const std::string& centre = spec.centres[static_cast<std::size_t>(i) % spec.centres.size()];
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%03d", centre.c_str(), ++per_centre[centre]);
    p.id = buf;
    const double head_top = rng.uniform(20.0, 60.0);
    const detail::Ellipsoid head{{head_top + 100.0, cy, cx}, {100.0, 78.0, 68.0}};
    const detail::Ellipsoid brain{{head_top + 85.0, cy, cx}, {55.0, 55.0, 50.0}};
    const double neck_top = head_top + 185.0, torso_top = head_top + 290.0;
    const detail::Ellipsoid bladder{{head_top + 640.0, cy + 10.0, cx}, {35.0, 35.0, 35.0}};

    std::vector<detail::Ellipsoid> tumours;
    std::vector<int> classes;
    std::vector<double> uptake;
    const int nt = 1 + static_cast<int>(rng.below(3));
    for (int k = 0; k < nt; ++k) {
      const bool primary = k == 0;
      detail::Ellipsoid e;
      if (primary) {
        e.centre = {head_top + rng.uniform(165.0, 215.0), cy + rng.uniform(-12.0, 12.0), cx + rng.uniform(-10.0, 10.0)};
        e.radii = {rng.uniform(10.0, 16.0), rng.uniform(10.0, 16.0), rng.uniform(10.0, 16.0)};
      } else {
        const double side = k == 1 ? 1.0 : -1.0;
        e.centre = {head_top + rng.uniform(200.0, 260.0), cy + rng.uniform(-8.0, 8.0),
                    cx + side * rng.uniform(25.0, 33.0)};
        e.radii = {rng.uniform(7.0, 11.0), rng.uniform(7.0, 11.0), rng.uniform(7.0, 11.0)};
      }
      tumours.push_back(e);
      classes.push_back(primary ? kGTVp : kGTVn);
      uptake.push_back(primary ? rng.uniform(4.0, 12.0) : rng.uniform(3.0, 8.0));
    }
    std::vector<detail::Ellipsoid> fps;
    const int nfp = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.fp_blobs_max + 1)));
    for (int k = 0; k < nfp; ++k) {
      const double r = rng.uniform(6.0, 9.0);
      fps.push_back({{head_top + rng.uniform(300.0, 400.0), cy + rng.uniform(-60.0, 60.0), cx + rng.uniform(-80.0, 80.0)},
                     {r, r, r}});
    }
    // Predicted masks are slightly mis-sized versions of the truth.
    std::vector<detail::Ellipsoid> predicted = tumours;
    for (auto& e : predicted)
      for (double& r : e.radii) r *= rng.uniform(0.85, 1.15);

    p.ct = Volume(d, sp, {0, 0, 0}, Modality::CT, -1000.0f);
    p.pet = Volume(d, sp, {0, 0, 0}, Modality::PET, 0.0f);
    p.truth = Volume(d, sp, {0, 0, 0}, Modality::Mask, 0.0f);
    p.pred = Volume(d, sp, {0, 0, 0}, Modality::Mask, 0.0f);
    for (std::size_t z = 0; z < d.z; ++z)
      for (std::size_t y = 0; y < d.y; ++y)
        for (std::size_t x = 0; x < d.x; ++x) {
          const Vec3 q{static_cast<double>(z) * sp[0], static_cast<double>(y) * sp[1],
                       static_cast<double>(x) * sp[2]};
          const double dy = q[1] - cy, dx = q[2] - cx;
          bool body = head.inside(q);
          if (q[0] >= neck_top && q[0] < torso_top) body = body || (dy * dy / (52.0 * 52.0) + dx * dx / (46.0 * 46.0) <= 1.0);
          if (q[0] >= torso_top) body = body || (dy * dy / (105.0 * 105.0) + dx * dx / (140.0 * 140.0) <= 1.0);
          float ct = -1000.0f, pet = 0.0f;
          if (body) {
            ct = static_cast<float>(40.0 + rng.normal(0.0, 10.0));
            pet = static_cast<float>(std::max(0.0, 1.0 + rng.normal(0.0, 0.1)));
            if (brain.inside(q)) {
              ct = static_cast<float>(30.0 + rng.normal(0.0, 5.0));
              pet = static_cast<float>(8.0 + rng.normal(0.0, 0.3));
            }
            if (bladder.inside(q)) pet = static_cast<float>(10.0 + rng.normal(0.0, 0.3));
          }
          float label = 0.0f, pred = 0.0f;
          for (std::size_t k = 0; k < tumours.size(); ++k) {
            if (tumours[k].inside(q)) {
              label = static_cast<float>(classes[k]);
              ct = static_cast<float>(70.0 + rng.normal(0.0, 8.0));
              pet = static_cast<float>(uptake[k] + rng.normal(0.0, 0.3));
            }
            if (predicted[k].inside(q)) pred = 1.0f;
          }
          for (const auto& e : fps)
            if (e.inside(q)) pred = 1.0f;
          p.ct.at(z, y, x) = ct;
          p.pet.at(z, y, x) = pet;
          p.truth.at(z, y, x) = label;
          p.pred.at(z, y, x) = pred;
        }

    const double age = std::clamp(rng.normal(62.0, 9.0), 30.0, 90.0);
    const double hpv = rng.uniform() < 0.55 ? 1.0 : 0.0;
    p.ehr = {std::round(age),
             rng.uniform() < 0.4 ? 1.0 : 0.0,
             rng.uniform() < 0.5 ? 1.0 : 0.0,
             hpv,
             static_cast<double>(rng.below(3)),
             rng.uniform() < 0.2 ? 1.0 : 0.0,
             rng.uniform() < 0.8 ? 1.0 : 0.0,
             rng.uniform() < 0.8 ? 1.0 : 0.0,
             std::round(rng.normal(78.0, 14.0))};
    for (std::size_t j = 1; j < p.ehr.size(); ++j)
      if (j != 3 && rng.uniform() < spec.missing_rate) p.ehr[j] = std::numeric_limits<double>::quiet_NaN();
    if (rng.uniform() < 2.0 * spec.missing_rate) p.ehr[3] = std::numeric_limits<double>::quiet_NaN();

    double mean_uptake = 0.0;
    for (double u : uptake) mean_uptake += u;
    mean_uptake /= static_cast<double>(uptake.size());
    const double eta = spec.log_scale - spec.beta_pet * (mean_uptake - 6.5) / 1.8 - spec.beta_age * (age - 62.0) / 9.0 -
                       spec.beta_hpv * hpv;
    const double u = 1.0 - rng.uniform();
    const double t = std::exp(eta) * std::pow(-std::log(u), 1.0 / spec.weibull_rho);
    true_time.push_back(t);

    nlohmann::json tj = nlohmann::json::array();
    for (std::size_t k = 0; k < tumours.size(); ++k) {
      auto e = detail::to_json(tumours[k]);
      e["class"] = classes[k] == kGTVp ? "GTVp" : "GTVn";
      e["pet_uptake"] = uptake[k];
      tj.push_back(e);
    }
    nlohmann::json fj = nlohmann::json::array();
    for (const auto& e : fps) fj.push_back(detail::to_json(e));
    p.params = {{"head_top_mm", head_top},
                {"brain_centre_mm", brain.centre[0]},
                {"neck_top_mm", neck_top},
                {"bladder_centre_mm", bladder.centre[0]},
                {"tumours", tj},
                {"false_positives", fj},
                {"mean_uptake", mean_uptake},
                {"log_scale", eta},
                {"true_time", t}};
    cohort.patients.push_back(std::move(p));
  }

  std::vector<double> obs = true_time;
  std::vector<int> ev;
  apply_censoring(obs, ev, spec.censoring_rate, rng);
  nlohmann::json pj = nlohmann::json::object();
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    auto& p = cohort.patients[i];
    p.time = std::max(obs[i], 1e-3);
    p.event = ev[i];
    p.params["observed_time"] = p.time;
    p.params["event"] = p.event;
    pj[p.id] = p.params;
  }
  cohort.ground_truth = {{"seed", seed},
                         {"weibull", {{"rho", spec.weibull_rho},
                                      {"log_scale", spec.log_scale},
                                      {"beta_pet_per_sd", spec.beta_pet},
                                      {"beta_age_per_sd", spec.beta_age},
                                      {"beta_hpv", spec.beta_hpv}}},
                         {"censoring_rate", spec.censoring_rate},
                         {"spacing_mm", {sp[0], sp[1], sp[2]}},
                         {"patients", pj}};
  return cohort;
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write " + path);
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(path + ": " + e.what());
  }
}

/// Survival-time histogram (20 equal bins up to the cohort maximum) and
/// censored fraction for each group.
inline csv::Table survival_summary(const CohortTable& c, const std::function<std::string(const std::string&)>& group_of,
                                   const std::vector<std::string>& groups, int n_bins = 20) {
  double tmax = 0.0;
  for (double v : c.time) tmax = std::max(tmax, v);
  csv::Table h;
  h.header = {"group", "patients", "censored_fraction", "bin", "bin_lo", "bin_hi", "count"};
  for (const auto& g : groups) {
    std::vector<long> counts(static_cast<std::size_t>(n_bins), 0);
    long n = 0, cens = 0;
    for (std::size_t i = 0; i < c.rows(); ++i) {
      if (group_of(c.patient_ids[i]) != g) continue;
      ++n;
      cens += c.event[i] == 0;
      const auto bin = static_cast<long>(c.time[i] / tmax * n_bins);
      counts[static_cast<std::size_t>(std::clamp(bin, 0L, static_cast<long>(n_bins - 1)))]++;
    }
    for (int k = 0; k < n_bins; ++k)
      h.rows.push_back({g, std::to_string(n), csv::format(n ? static_cast<double>(cens) / static_cast<double>(n) : 0.0),
                        std::to_string(k), csv::format(tmax * k / n_bins), csv::format(tmax * (k + 1) / n_bins),
                        std::to_string(counts[static_cast<std::size_t>(k)])});
  }
  return h;
}

/// Layout: images/<id>__CT.nii.gz, images/<id>__PT.nii.gz,
/// masks/<id>__pred.nii.gz, masks/<id>__gt.nii.gz, ehr.csv, ground_truth.json,
/// summary.csv.
inline void write_synthetic_cohort(const SyntheticCohort& c, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  for (const auto& p : c.patients) {
    save_nifti(p.ct, (fs::path(dir) / "images" / (p.id + "__CT.nii.gz")).string());
    save_nifti(p.pet, (fs::path(dir) / "images" / (p.id + "__PT.nii.gz")).string());
    save_nifti(p.pred, (fs::path(dir) / "masks" / (p.id + "__pred.nii.gz")).string());
    save_nifti(p.truth, (fs::path(dir) / "masks" / (p.id + "__gt.nii.gz")).string());
  }
  write_cohort_csv((fs::path(dir) / "ehr.csv").string(), c.table());
  write_json((fs::path(dir) / "ground_truth.json").string(), c.ground_truth);
  const csv::Table summary = survival_summary(c.table(), [](const std::string&) { return std::string("all"); }, {"all"});
  csv::write((fs::path(dir) / "summary.csv").string(), summary);
}

// ------------------------------------------------------------------ config

inline nlohmann::json default_config() {
  return nlohmann::json::parse(R"({
    "paths": {"images": "images", "masks": "masks", "ehr": "ehr.csv", "out": "out"},
    "stages": {"localize": true, "features": true, "classify": true, "evaluate": true,
               "survival": true, "neural": true, "ensemble": true},
    "seeds": {"split": 1, "classify": 2, "neural": 3},
    "split": {"val_frac": 0.2},
    "workers": 0,
    "localize": {"coarse_spacing_mm": 7.0, "ct_lo": -1024.0, "ct_hi": 1024.0, "head_frac": 0.05,
                 "neck_window_mm": 300.0},
    "classify": {"C": 1.0, "gamma": "scale", "min_overlap": 0.1},
    "survival": {"ehr_columns": ["age", "hpv", "performance"],
                 "descriptor_columns": ["pet_mean", "n_tumours"]},
    "neural": {"model": "multi_patch", "epochs": 100, "lr": 0.016, "batch_size": 16, "milestones": [60, 80],
               "lr_gamma": 0.1, "bins": 0, "patch": [32, 32, 32], "float32": true},
    "ensemble": {"mode": "zscore_mean"},
    "synthetic": {"patients": 20, "seed": 7, "censoring_rate": 0.3, "missing_rate": 0.05}
  })");
}

namespace detail {

inline void merge_checked(nlohmann::json& base, const nlohmann::json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError("config: '" + (prefix.empty() ? "<root>" : prefix) + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      merge_checked(slot, it.value(), key);
    } else {
      const bool num_ok = slot.is_number() && it.value().is_number();
      if (slot.type() != it.value().type() && !num_ok)
        throw ConfigError("config: '" + key + "' has type " + it.value().type_name() + ", expected " + slot.type_name());
      slot = it.value();
    }
  }
}

}  // namespace detail

/// `a.b.c=value`; the value is parsed as JSON when possible, else taken as a
/// string.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
  detail::merge_checked(cfg, patch, "");
}

inline void apply_seed(nlohmann::json& cfg, std::uint64_t seed) {
  for (auto& [k, v] : cfg["seeds"].items()) v = seed;
}

inline void validate_config(const nlohmann::json& c) {
  const double f = c.at("split").at("val_frac").get<double>();
  if (!(f > 0.0 && f < 1.0)) throw ConfigError("config: split.val_frac must lie in (0, 1)");
  for (const auto& [k, v] : c.at("seeds").items())
    if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError("config: seeds." + k + " must be an integer");
  if (c.at("workers").get<int>() < 0) throw ConfigError("config: workers must be >= 0");
  const auto& n = c.at("neural");
  if (n.at("epochs").get<int>() < 1) throw ConfigError("config: neural.epochs must be >= 1");
  if (!(n.at("lr").get<double>() >= 0.0)) throw ConfigError("config: neural.lr must be >= 0");
  if (n.at("batch_size").get<int>() < 1) throw ConfigError("config: neural.batch_size must be >= 1");
  if (n.at("patch").size() != 3) throw ConfigError("config: neural.patch must have three entries");
  try {
    nn::model_kind_from_string(n.at("model"));
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("config: neural.model: ") + e.what());
  }
  const std::string mode = c.at("ensemble").at("mode");
  if (mode != "zscore_mean" && mode != "raw_mean") throw ConfigError("config: ensemble.mode must be zscore_mean or raw_mean");
  const std::string gamma = c.at("classify").at("gamma").is_string() ? c.at("classify").at("gamma").get<std::string>() : "";
  if (gamma != "scale") throw ConfigError("config: classify.gamma must be \"scale\"");
  const auto& cal = calibrated_feature_names();
  for (const auto& d : c.at("survival").at("descriptor_columns"))
    if (!d.is_string() || std::find(cal.begin(), cal.end(), d.get<std::string>()) == cal.end())
      throw ConfigError("config: unknown descriptor column " + d.dump());
  for (const auto& e : c.at("survival").at("ehr_columns"))
    if (!e.is_string()) throw ConfigError("config: survival.ehr_columns must hold strings");
}

/// Defaults, then the file, then dotted overrides, then PROGKIT_SEED. Relative
/// input paths resolve against the config file's directory.
inline nlohmann::json load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  nlohmann::json cfg = default_config();
  if (!path.empty()) {
    nlohmann::json user;
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    try {
      user = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: " + path + ": " + e.what());
    }
    detail::merge_checked(cfg, user, "");
    const auto base = std::filesystem::path(path).parent_path();
    for (const char* k : {"images", "masks", "ehr", "out"}) {
      std::filesystem::path p = cfg["paths"][k].get<std::string>();
      if (p.is_relative() && !base.empty()) cfg["paths"][k] = (base / p).lexically_normal().string();
    }
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  if (const char* env = std::getenv("PROGKIT_SEED")) {
    char* end = nullptr;
    const unsigned long long s = std::strtoull(env, &end, 10);
    if (!*env || *end) throw ConfigError("PROGKIT_SEED must be a non-negative integer");
    apply_seed(cfg, s);
  }
  validate_config(cfg);
  return cfg;
}

inline std::string config_hash(const nlohmann::json& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(cfg.dump())));
  return buf;
}

// ---------------------------------------------------------------- pipeline

/// An error raised inside a named pipeline stage.
struct StageError : Error {
  StageError(std::string stage, const std::string& msg, int code)
      : Error("[" + stage + "] " + msg), stage_(std::move(stage)), code_(code) {}
  const std::string& stage() const noexcept { return stage_; }
  int exit_code() const noexcept { return code_; }

 private:
  std::string stage_;
  int code_;
};

inline constexpr int kExitOk = 0, kExitConfig = 2, kExitData = 3, kExitStage = 4;

struct RunResult {
  int exit_code = kExitOk;
  std::string message;
  std::vector<std::string> files;  // relative to the output directory
  nlohmann::json summary = nlohmann::json::object();
};

namespace detail {

struct PatientData {
  std::string id;
  Localization loc;
  LabelMap components;
  std::vector<RegionFeatures> regions;
  std::vector<int> truth_class;  // per region, empty without ground truth
  std::vector<Volume> patches;   // per region, fused 1 mm
  std::optional<Volume> roi_patch;
  Volume truth;                  // RoI ground truth labels
  bool has_truth = false;
};

}  // namespace detail

/// Executes the enabled stages; reports go under paths.out. Stages that are
/// disabled still run when a later enabled stage needs their results, but
/// only enabled stages write reports.
inline RunResult run_pipeline(const nlohmann::json& cfg_in) {
  namespace fs = std::filesystem;
  RunResult res;
  nlohmann::json cfg;
  try {
    cfg = default_config();
    detail::merge_checked(cfg, cfg_in, "");
    validate_config(cfg);
  } catch (const ConfigError& e) {
    res.exit_code = kExitConfig;
    res.message = e.what();
    return res;
  } catch (const nlohmann::json::exception& e) {
    res.exit_code = kExitConfig;
    res.message = std::string("config: ") + e.what();
    return res;
  }
  const auto& stages = cfg["stages"];
  auto on = [&](const char* s) { return stages.at(s).get<bool>(); };
  const fs::path out = cfg["paths"]["out"].get<std::string>();
  const fs::path images = cfg["paths"]["images"].get<std::string>();
  const fs::path masks = cfg["paths"]["masks"].get<std::string>();
  const fs::path ehr_path = cfg["paths"]["ehr"].get<std::string>();
  const int workers = cfg["workers"].get<int>() == 0 ? default_workers() : cfg["workers"].get<int>();
  nlohmann::json status = nlohmann::json::object();

  auto emit = [&](const fs::path& rel, const std::function<void(const std::string&)>& writer) {
    fs::create_directories((out / rel).parent_path());
    writer((out / rel).string());
    res.files.push_back(rel.generic_string());
  };
  auto emit_json = [&](const fs::path& rel, const nlohmann::json& j) {
    emit(rel, [&](const std::string& p) { write_json(p, j); });
  };
  auto write_manifest = [&] {
    std::sort(res.files.begin(), res.files.end());
    nlohmann::json m = {{"config_hash", config_hash(cfg)},
                        {"config", cfg},
                        {"stages", status},
                        {"exit_code", res.exit_code},
                        {"files", res.files}};
    if (!res.message.empty()) m["error"] = res.message;
    fs::create_directories(out);
    write_json((out / "manifest.json").string(), m);
  };

  const bool need_survival = on("survival") || on("ensemble");
  const bool need_neural = on("neural") || on("ensemble");
  const bool need_classes = on("classify") || on("evaluate") || need_survival || need_neural;
  const bool need_features = on("features") || need_classes;
  const bool need_images = on("localize") || need_features;
  const bool any = need_images || need_survival;

  std::string stage = "ingest";
  try {
    if (!any) {
      write_manifest();
      return res;
    }
    // Patient list: EHR table when present, otherwise the image directory.
    std::optional<CohortTable> ehr;
    if (need_survival || need_neural) {
      if (!fs::exists(ehr_path))
        throw StageError(need_survival ? "survival" : "neural", "missing EHR CSV: " + ehr_path.string(), kExitData);
      ehr = read_cohort_csv(ehr_path.string());
      for (const auto& c : cfg["survival"]["ehr_columns"])
        if (ehr->column(c.get<std::string>()) < 0)
          throw StageError(need_survival ? "survival" : "neural",
                           "EHR CSV lacks column '" + c.get<std::string>() + "'", kExitData);
    }
    std::vector<std::string> ids;
    if (ehr) {
      ids = ehr->patient_ids;
    } else {
      if (!fs::is_directory(images)) throw StageError("ingest", "missing image directory: " + images.string(), kExitData);
      for (const auto& e : fs::directory_iterator(images)) {
        const std::string name = e.path().filename().string();
        const std::string suffix = "__CT.nii.gz";
        if (name.size() > suffix.size() && name.ends_with(suffix)) ids.push_back(name.substr(0, name.size() - suffix.size()));
      }
      std::sort(ids.begin(), ids.end());
    }
    if (ids.empty()) throw StageError("ingest", "no patients found", kExitData);
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < ids.size(); ++i) index[ids[i]] = i;

    stage = "split";
    const SplitAssignment split = split_cohort(ids, cfg["seeds"]["split"].get<std::uint64_t>(),
                                               cfg["split"]["val_frac"].get<double>());
    const auto train_ids = split.train(), val_ids = split.validation();

    // ---------------------------------------------------- per-patient work
    std::vector<detail::PatientData> pdata;
    if (need_images) {
      stage = "localize";
      LocalizeOptions lo;
      lo.coarse_spacing_mm = cfg["localize"]["coarse_spacing_mm"];
      lo.ct_lo = cfg["localize"]["ct_lo"];
      lo.ct_hi = cfg["localize"]["ct_hi"];
      lo.head_frac = cfg["localize"]["head_frac"];
      lo.neck_window_mm = cfg["localize"]["neck_window_mm"];
      const auto pd = cfg["neural"]["patch"].get<std::vector<std::size_t>>();
      const Dims patch_dims{pd[0], pd[1], pd[2]};
      const bool want_patches = need_neural && cfg["neural"]["model"] == "multi_patch";
      const bool want_roi_patch = need_neural && cfg["neural"]["model"] == "deep_fusion";
      std::function<detail::PatientData(std::size_t)> work = [&](std::size_t i) {
        detail::PatientData p;
        p.id = ids[i];
        auto img = [&](const fs::path& dir, const std::string& tag) {
          const fs::path f = dir / (p.id + "__" + tag + ".nii.gz");
          if (!fs::exists(f)) throw StageError("localize", "missing input: " + f.string(), kExitData);
          return f.string();
        };
        Volume ct = load_nifti(img(images, "CT"), Modality::CT);
        Volume pet = load_nifti(img(images, "PT"), Modality::PET);
        ct.set_modality(Modality::CT);
        pet.set_modality(Modality::PET);
        try {
          p.loc = localize(ct, pet, lo);
        } catch (const DetectionError& e) {
          throw StageError("localize", p.id + ": " + e.what(), kExitStage);
        }
        if (!need_features) return p;
        const Volume ct_roi = crop_mm(ct, p.loc.box, default_pad(ct));
        const Volume pet_roi = crop_mm(pet, p.loc.box, default_pad(pet));
        Volume pred = load_nifti(img(masks, "pred"), Modality::Mask);
        pred.set_modality(Modality::Mask);
        if (!pred.same_grid(ct)) throw StageError("features", p.id + ": predicted mask grid differs from CT", kExitData);
        const Volume pred_roi = crop_mm(pred, p.loc.box, 0.0f);
        p.components = connected_components(pred_roi);
        p.regions = all_region_descriptors(p.components, ct_roi, pet_roi);
        const fs::path gt = masks / (p.id + "__gt.nii.gz");
        if (fs::exists(gt)) {
          Volume g = load_nifti(gt.string(), Modality::Mask);
          g.set_modality(Modality::Mask);
          p.truth = crop_mm(g, p.loc.box, 0.0f);
          p.truth_class = component_truth_labels(p.components, p.truth, cfg["classify"]["min_overlap"].get<double>());
          p.has_truth = true;
        }
        if (want_patches || want_roi_patch) {
          const Volume fused = fuse_average(znormalize(window_clip(ct_roi, lo.ct_lo, lo.ct_hi)), znormalize(pet_roi));
          if (want_patches)
            for (const auto& r : p.regions) p.patches.push_back(extract_patch(fused, r.centroid_mm, patch_dims));
          if (want_roi_patch) {
            const auto& b = p.loc.box;
            p.roi_patch = extract_patch(fused, b.min_corner_mm + b.size_mm * 0.5, nn::default_patch(nn::ModelKind::DeepFusion));
          }
        }
        return p;
      };
      pdata = parallel_map<detail::PatientData>(ids.size(), workers, work);
      if (on("localize")) {
        csv::Table boxes;
        boxes.header = {"patient_id", "head_top_mm", "brain_peak_mm", "neck_drop_mm", "min_z_mm", "min_y_mm",
                        "min_x_mm", "size_z_mm", "size_y_mm", "size_x_mm"};
        for (const auto& p : pdata) {
          const auto& b = p.loc.box;
          const auto& lm = p.loc.landmarks;
          emit_json(fs::path("localize") / (p.id + ".json"),
                    {{"min_corner_mm", {b.min_corner_mm[0], b.min_corner_mm[1], b.min_corner_mm[2]}},
                     {"size_mm", {b.size_mm[0], b.size_mm[1], b.size_mm[2]}},
                     {"landmarks",
                      {{"head_top_mm", lm.head_top_mm}, {"brain_peak_mm", lm.brain_peak_mm},
                       {"neck_drop_mm", std::isnan(lm.neck_drop_mm) ? nlohmann::json() : nlohmann::json(lm.neck_drop_mm)}}}});
          boxes.rows.push_back({p.id, csv::format(lm.head_top_mm), csv::format(lm.brain_peak_mm),
                                std::isnan(lm.neck_drop_mm) ? "" : csv::format(lm.neck_drop_mm),
                                csv::format(b.min_corner_mm[0]), csv::format(b.min_corner_mm[1]),
                                csv::format(b.min_corner_mm[2]), csv::format(b.size_mm[0]), csv::format(b.size_mm[1]),
                                csv::format(b.size_mm[2])});
        }
        emit("localize/boxes.csv", [&](const std::string& p) { csv::write(p, boxes); });
        status["localize"] = "ok";
      }
      if (on("features")) {
        stage = "features";
        csv::Table t;
        t.header = {"patient_id", "label"};
        for (const auto& n : RegionFeatures::names()) t.header.push_back(n);
        for (const auto& p : pdata)
          for (std::size_t r = 0; r < p.regions.size(); ++r) {
            std::vector<std::string> row{p.id, std::to_string(r + 1)};
            for (double v : p.regions[r].to_vector()) row.push_back(csv::format(v));
            t.rows.push_back(std::move(row));
          }
        emit("features/regions.csv", [&](const std::string& p) { csv::write(p, t); });
        status["features"] = "ok";
      }
    }

    // ------------------------------------------------------------ classify
    std::map<std::string, std::vector<int>> region_class;  // predicted class per region
    if (need_classes) {
      stage = "classify";
      std::vector<std::vector<double>> X;
      std::vector<int> y;
      for (const auto& id : train_ids) {
        const auto& p = pdata[index[id]];
        if (!p.has_truth) continue;
        for (std::size_t r = 0; r < p.regions.size(); ++r) {
          X.push_back(p.regions[r].to_vector());
          y.push_back(p.truth_class[r]);
        }
      }
      if (std::set<int>(y.begin(), y.end()).size() < 2)
        throw StageError("classify", "training regions need ground truth with at least two classes", kExitData);
      SvmOptions so;
      so.C = cfg["classify"]["C"];
      so.seed = cfg["seeds"]["classify"].get<std::uint64_t>();
      const SvmModel model = svm_train(X, y, so);
      std::vector<int> vp, vt;
      csv::Table preds;
      preds.header = {"patient_id", "label", "split", "predicted", "truth"};
      for (const auto& p : pdata) {
        auto& cls = region_class[p.id];
        for (std::size_t r = 0; r < p.regions.size(); ++r) {
          cls.push_back(svm_predict(model, p.regions[r].to_vector()));
          const std::string truth = p.has_truth ? std::to_string(p.truth_class[r]) : "";
          preds.rows.push_back({p.id, std::to_string(r + 1), split.split.at(p.id), std::to_string(cls.back()), truth});
          if (p.has_truth && split.split.at(p.id) == "validation") {
            vp.push_back(cls.back());
            vt.push_back(p.truth_class[r]);
          }
        }
      }
      if (on("classify")) {
        emit_json("classify/model.json", to_json(model));
        emit("classify/predictions.csv", [&](const std::string& p) { csv::write(p, preds); });
        nlohmann::json f1 = nlohmann::json::object();
        if (!vp.empty()) {
          const F1Scores f = f1_scores(vp, vt);
          f1 = {{"macro_f1", f.macro_f1}, {"micro_f1", f.micro_f1}, {"regions", vp.size()}};
        }
        emit_json("classify/validation_f1.json", f1);
        status["classify"] = "ok";
      }
      res.summary["classify_regions"] = X.size();
    }

    // ------------------------------------------------------------ evaluate
    if (on("evaluate")) {
      stage = "evaluate";
      std::vector<Volume> pv, tv;
      for (const auto& id : val_ids) {
        const auto& p = pdata[index[id]];
        if (!p.has_truth) continue;
        Volume lab(p.components.dims, p.components.spacing, p.components.origin, Modality::Mask, 0.0f);
        const auto& cls = region_class[p.id];
        auto data = lab.data();
        for (std::size_t v = 0; v < data.size(); ++v) {
          const int l = p.components.labels[v];
          if (l > 0) data[v] = static_cast<float>(cls[static_cast<std::size_t>(l - 1)]);
        }
        pv.push_back(std::move(lab));
        tv.push_back(p.truth);
      }
      nlohmann::json seg = nlohmann::json::object();
      if (!pv.empty()) {
        const auto s = evaluate_segmentation(pv, tv);
        seg = {{"dice_gtvp", s.dice_gtvp}, {"dice_gtvn", s.dice_gtvn}, {"aggregated_dice", s.aggregated},
               {"patients", pv.size()}};
      }
      emit_json("eval/segmentation.json", seg);
      res.summary["segmentation"] = seg;
    }

    // ------------------------------------------------------------ survival
    std::map<std::string, double> weibull_risk;
    std::vector<std::string> ehr_cols, desc_cols;
    CohortTable full;
    if (need_survival || need_neural) {
      ehr_cols = cfg["survival"]["ehr_columns"].get<std::vector<std::string>>();
      desc_cols = cfg["survival"]["descriptor_columns"].get<std::vector<std::string>>();
      full = ehr->select(ehr_cols);
      const auto& cal = calibrated_feature_names();
      full.columns.insert(full.columns.end(), cal.begin(), cal.end());
      full.x.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(full.columns.size()));
      for (std::size_t i = 0; i < full.rows(); ++i) {
        const auto& p = pdata[index[full.patient_ids[i]]];
        std::vector<RegionFeatures> tumours;
        const auto& cls = region_class[p.id];
        for (std::size_t r = 0; r < p.regions.size(); ++r)
          if (cls[r] != kBackground) tumours.push_back(p.regions[r]);
        std::vector<double> f(cal.size(), std::numeric_limits<double>::quiet_NaN());
        if (!tumours.empty()) f = select_calibrated_features(patient_feature_vector(tumours));
        else f.back() = 0.0;
        for (std::size_t j = 0; j < f.size(); ++j)
          full.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(ehr_cols.size() + j)) = f[j];
      }
    }
    auto rows_of = [&](const std::vector<std::string>& which) {
      std::vector<std::size_t> r;
      for (std::size_t i = 0; i < full.rows(); ++i)
        if (std::find(which.begin(), which.end(), full.patient_ids[i]) != which.end()) r.push_back(i);
      return r;
    };
    if (need_survival) {
      stage = "survival";
      const CohortTable tr = full.subset(rows_of(train_ids)), va = full.subset(rows_of(val_ids));
      std::vector<std::string> both = ehr_cols;
      both.insert(both.end(), desc_cols.begin(), desc_cols.end());
      const CohortTable tr_main = impute_missing(tr.select(both)), va_main = impute_missing(va.select(both));
      WeibullAftModel wm;
      try {
        wm = fit_weibull_aft(tr_main);
      } catch (const Error& e) {
        throw StageError("survival", std::string("Weibull fit failed: ") + e.what(), kExitStage);
      }
      const auto wr = predict_risks(wm, va_main);
      for (std::size_t i = 0; i < va_main.rows(); ++i) weibull_risk[va_main.patient_ids[i]] = wr[i];
      double c_w = std::numeric_limits<double>::quiet_NaN();
      try {
        c_w = concordance_index(wr, va_main.time, va_main.event);
      } catch (const UndefinedError&) {
      }
      nlohmann::json cox = nlohmann::json::object();
      try {
        const CoxModel cm = fit_cox_ph(tr_main);
        cox = to_json(cm);
        cox["validation_cindex"] = concordance_index(predict_risks(cm, va_main), va_main.time, va_main.event);
      } catch (const SeparationError& e) {
        cox = {{"error", e.what()}, {"column", e.column()}};
      } catch (const Error& e) {
        cox = {{"error", e.what()}};
      }
      const std::vector<std::vector<std::string>> sets{ehr_cols, both, desc_cols};
      const auto sweep = calibration_sweep(tr, va, sets, SurvivalModelKind::Weibull);
      if (on("survival")) {
        auto wj = to_json(wm);
        wj["validation_cindex"] = std::isnan(c_w) ? nlohmann::json() : nlohmann::json(c_w);
        emit_json("survival/weibull.json", wj);
        emit_json("survival/cox.json", cox);
        csv::Table sig;
        sig.header = {"name", "beta", "se", "z", "p"};
        if (wm.covariance_ok)
          for (const auto& r : coefficient_significance(wm))
            sig.rows.push_back({r.name, csv::format(r.beta), csv::format(r.se), csv::format(r.z), csv::format(r.p)});
        emit("survival/weibull_significance.csv", [&](const std::string& p) { csv::write(p, sig); });
        csv::Table sw;
        sw.header = {"features", "cindex", "error"};
        for (const auto& r : sweep) {
          std::string names;
          for (const auto& s : r.subset) names += (names.empty() ? "" : "+") + s;
          sw.rows.push_back({names, r.ok ? csv::format(r.c_index) : "", r.error});
        }
        emit("survival/sweep.csv", [&](const std::string& p) { csv::write(p, sw); });
        status["survival"] = "ok";
      }
      res.summary["weibull_validation_cindex"] = std::isnan(c_w) ? nlohmann::json() : nlohmann::json(c_w);
    }

    // -------------------------------------------------------------- neural
    std::map<std::string, double> neural_risk;
    if (need_neural) {
      stage = "neural";
      const auto& nc = cfg["neural"];
      nn::ModelConfig mc;
      mc.kind = nn::model_kind_from_string(nc["model"]);
      const auto pd = nc["patch"].get<std::vector<std::size_t>>();
      mc.patch = mc.kind == nn::ModelKind::DeepFusion ? nn::default_patch(mc.kind) : Dims{pd[0], pd[1], pd[2]};
      mc.conv_float32 = nc["float32"];
      auto build = [&](const std::vector<std::string>& which) {
        std::vector<nn::Sample> out;
        const CohortTable t = impute_missing(full.subset(rows_of(which)).select(ehr_cols));
        for (std::size_t i = 0; i < t.rows(); ++i) {
          const auto& p = pdata[index[t.patient_ids[i]]];
          nn::Sample s;
          s.id = p.id;
          s.time = t.time[i];
          s.event = t.event[i];
          s.ehr = t.x.row(static_cast<Eigen::Index>(i)).transpose();
          if (p.roi_patch) s.roi_patch = *p.roi_patch;
          if (mc.kind == nn::ModelKind::DeepFusion) {
            out.push_back(std::move(s));
            continue;
          }
          const auto& cls = region_class[p.id];
          int n = 0;
          for (int c : cls) n += c != kBackground;
          s.graph.descriptors = nn::Mat(n, mc.n_descriptors);
          int k = 0;
          for (std::size_t r = 0; r < p.regions.size(); ++r) {
            if (cls[r] == kBackground) continue;
            s.graph.patches.push_back(p.patches[r]);
            const auto f = select_calibrated_features(p.regions[r], n);
            for (int j = 0; j < mc.n_descriptors; ++j) s.graph.descriptors(k, j) = f[static_cast<std::size_t>(j)];
            ++k;
          }
          out.push_back(std::move(s));
        }
        return out;
      };
      const auto tr = build(train_ids), va = build(val_ids);
      std::vector<double> tt;
      std::vector<int> te;
      for (const auto& s : tr) {
        tt.push_back(s.time);
        te.push_back(s.event);
      }
      int events = 0;
      for (int e : te) events += e;
      if (events < 1) throw StageError("neural", "no events in the training split", kExitData);
      const int K = nc["bins"].get<int>() > 0 ? nc["bins"].get<int>() : default_bin_count(events);
      const TimeBins bins = make_time_bins(tt, te, K);
      nn::TrainConfig tc;
      tc.epochs = nc["epochs"];
      tc.lr = nc["lr"];
      tc.batch_size = nc["batch_size"];
      tc.milestones = nc["milestones"].get<std::vector<int>>();
      tc.lr_gamma = nc["lr_gamma"];
      tc.seed = cfg["seeds"]["neural"].get<std::uint64_t>();
      nn::TrainResult r;
      try {
        r = nn::train(mc, tr, va, bins, tc);
      } catch (const Error& e) {
        throw StageError("neural", e.what(), kExitStage);
      }
      const auto risks = nn::predict_risks(r.model, va);
      for (std::size_t i = 0; i < va.size(); ++i) neural_risk[va[i].id] = risks[i];
      if (on("neural")) {
        emit_json("neural/checkpoint.json", nn::to_json(r.model));
        emit("neural/training_log.csv", [&](const std::string& p) { nn::write_training_log(p, r.history); });
        csv::Table rt;
        rt.header = {"patient_id", "risk"};
        for (std::size_t i = 0; i < va.size(); ++i) rt.rows.push_back({va[i].id, csv::format(risks[i])});
        emit("neural/validation_risk.csv", [&](const std::string& p) { csv::write(p, rt); });
        status["neural"] = "ok";
      }
      res.summary["neural_validation_cindex"] =
          r.history.empty() || std::isnan(r.history.back().val_cindex) ? nlohmann::json()
                                                                       : nlohmann::json(r.history.back().val_cindex);
      res.summary["neural_excluded_patients"] = r.excluded;
    }

    // ------------------------------------------------------------ ensemble
    if (on("ensemble")) {
      stage = "ensemble";
      std::vector<double> a, b, t;
      std::vector<int> e;
      csv::Table et;
      et.header = {"patient_id", "weibull_risk", "neural_risk", "ensemble_risk"};
      std::vector<std::string> order;
      for (const auto& id : val_ids) {
        const auto i = rows_of({id});
        if (i.empty() || !weibull_risk.count(id) || !neural_risk.count(id)) continue;
        order.push_back(id);
        a.push_back(weibull_risk[id]);
        b.push_back(neural_risk[id]);
        t.push_back(full.time[i[0]]);
        e.push_back(full.event[i[0]]);
      }
      std::vector<std::string> warnings;
      const auto mode = cfg["ensemble"]["mode"] == "raw_mean" ? nn::EnsembleMode::RawMean : nn::EnsembleMode::ZScoreMean;
      const auto ens = nn::ensemble_risk(a, b, mode, &warnings);
      for (std::size_t i = 0; i < order.size(); ++i)
        et.rows.push_back({order[i], csv::format(a[i]), csv::format(b[i]), csv::format(ens[i])});
      emit("ensemble/risk.csv", [&](const std::string& p) { csv::write(p, et); });
      nlohmann::json ej = {{"mode", cfg["ensemble"]["mode"]}, {"warnings", warnings}};
      try {
        ej["validation_cindex"] = concordance_index(ens, t, e);
      } catch (const UndefinedError&) {
        ej["validation_cindex"] = nullptr;
      }
      emit_json("ensemble/summary.json", ej);
      res.summary["ensemble_validation_cindex"] = ej["validation_cindex"];
      status["ensemble"] = "ok";
    }

    // Split summary: survival-time histograms and censoring per split.
    if (on("evaluate")) {
      stage = "evaluate";
      if (ehr) {
        const csv::Table h = survival_summary(*ehr, [&](const std::string& id) { return split.split.at(id); },
                                              {"train", "validation"});
        emit(fs::path("eval") / "split_summary.csv", [&](const std::string& p) { csv::write(p, h); });
      }
      csv::Table sp;
      sp.header = {"patient_id", "centre", "split"};
      for (const auto& id : ids) sp.rows.push_back({id, split.centre.at(id), split.split.at(id)});
      emit("eval/split.csv", [&](const std::string& p) { csv::write(p, sp); });
      emit_json("eval/summary.json", res.summary);
      status["evaluate"] = "ok";
    }
  } catch (const StageError& e) {
    res.exit_code = e.exit_code();
    res.message = e.what();
    status[e.stage()] = "failed";
  } catch (const ConfigError& e) {
    res.exit_code = kExitConfig;
    res.message = "[" + stage + "] " + e.what();
    status[stage] = "failed";
  } catch (const IngestionError& e) {
    res.exit_code = kExitData;
    res.message = "[" + stage + "] " + e.what();
    status[stage] = "failed";
  } catch (const FormatError& e) {
    res.exit_code = kExitData;
    res.message = "[" + stage + "] " + e.what();
    status[stage] = "failed";
  } catch (const UnsupportedError& e) {
    res.exit_code = kExitData;
    res.message = "[" + stage + "] " + e.what();
    status[stage] = "failed";
  } catch (const Error& e) {
    res.exit_code = kExitStage;
    res.message = "[" + stage + "] " + e.what();
    status[stage] = "failed";
  }
  write_manifest();
  return res;
}

}  // namespace progkit
