// progkit command-line front end.
#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "progkit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace progkit;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int workers = 0;
  bool raw = false;
  std::vector<std::string> overrides;
};

void emit_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream o(path);
  if (!o) throw IngestionError("cannot write " + path);
  o << text;
}

void emit_json(const std::string& path, const json& j) { emit_text(path, j.dump(2) + "\n"); }

void emit_csv(const std::string& path, const csv::Table& t) {
  if (path.empty() || path == "-") {
    std::ostringstream s;
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) s << (i ? "," : "") << r[i];
      s << '\n';
    };
    line(t.header);
    for (const auto& r : t.rows) line(r);
    std::cout << s.str();
    return;
  }
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  csv::write(path, t);
}

std::uint64_t resolve_seed(const Common& c, std::uint64_t fallback) {
  if (c.seed) return *c.seed;
  if (const char* env = std::getenv("PROGKIT_SEED")) {
    char* end = nullptr;
    const unsigned long long s = std::strtoull(env, &end, 10);
    if (!*env || *end) throw ConfigError("PROGKIT_SEED must be a non-negative integer");
    return s;
  }
  return fallback;
}

Volume load(const std::string& path, Modality m) {
  Volume v = load_nifti(path, m);
  v.set_modality(m);
  return v;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

csv::Table region_table(const std::string& id, const std::vector<RegionFeatures>& regions,
                        const std::vector<int>* classes) {
  csv::Table t;
  t.header = {"patient_id", "label"};
  for (const auto& n : RegionFeatures::names()) t.header.push_back(n);
  if (classes) t.header.push_back("class");
  for (std::size_t r = 0; r < regions.size(); ++r) {
    std::vector<std::string> row{id, std::to_string(r + 1)};
    for (double v : regions[r].to_vector()) row.push_back(csv::format(v));
    if (classes) row.push_back(std::to_string((*classes)[r]));
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::vector<std::vector<double>> feature_rows(const csv::Table& t) {
  std::vector<int> cols;
  for (const auto& n : RegionFeatures::names()) cols.push_back(t.require(n));
  std::vector<std::vector<double>> X;
  for (const auto& r : t.rows) {
    std::vector<double> x;
    for (int c : cols) x.push_back(csv::to_double(r[static_cast<std::size_t>(c)], "feature"));
    X.push_back(std::move(x));
  }
  return X;
}

std::map<std::string, double> read_risks(const std::string& path, std::vector<std::string>* order) {
  const csv::Table t = csv::read(path);
  const int id = t.require("patient_id"), rk = t.require("risk");
  std::map<std::string, double> out;
  for (const auto& r : t.rows) {
    const std::string& pid = r[static_cast<std::size_t>(id)];
    if (!out.emplace(pid, csv::to_double(r[static_cast<std::size_t>(rk)], path)).second)
      throw IngestionError(path + ": duplicate patient " + pid);
    if (order) order->push_back(pid);
  }
  return out;
}

json load_run_config(const Common& c, const std::string& data) {
  json cfg = load_config(c.config, c.overrides);
  if (!data.empty()) {
    cfg["paths"]["images"] = (fs::path(data) / "images").string();
    cfg["paths"]["masks"] = (fs::path(data) / "masks").string();
    cfg["paths"]["ehr"] = (fs::path(data) / "ehr.csv").string();
  }
  if (!c.out.empty()) cfg["paths"]["out"] = c.out;
  if (c.workers > 0) cfg["workers"] = c.workers;
  if (c.seed) apply_seed(cfg, *c.seed);
  if (c.raw) cfg["ensemble"]["mode"] = "raw_mean";
  return cfg;
}

int report(const RunResult& r) {
  if (r.exit_code != kExitOk) std::cerr << "error: " << r.message << '\n';
  else std::cout << r.summary.dump(2) << '\n';
  return r.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Head-and-neck PET/CT prognosis toolkit"};
  app.require_subcommand(1);
  Common c;
  auto add_common = [&](CLI::App* s, bool config) {
    if (config) {
      s->add_option("--config", c.config, "Pipeline configuration (JSON)");
      s->add_option("--set", c.overrides, "Dotted config override key=value (repeatable)");
    }
    s->add_option("--seed", c.seed, "Seed for every stochastic step");
    s->add_option("--out", c.out, "Output file or directory");
    s->add_option("--workers", c.workers, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  };

  std::string ct, pet, mask, truth, id, profile, features, model_path, cohort, kind = "weibull", train_csv, val_csv,
      risk_a, risk_b, ids_path, data, nn_model;
  std::vector<std::string> columns_sets, preds, truths;
  std::string columns;
  double val_frac = 0.2, C = 1.0, censoring = -1.0, min_overlap = 0.1;
  int patients = 0;

  auto* loc = app.add_subcommand("localize", "Locate the head-and-neck RoI box");
  loc->add_option("--ct", ct)->required();
  loc->add_option("--pet", pet)->required();
  loc->add_option("--profile", profile, "Write the axial profiles as CSV");
  add_common(loc, false);

  auto* feat = app.add_subcommand("features", "Per-component descriptors of a predicted mask");
  feat->add_option("--ct", ct)->required();
  feat->add_option("--pet", pet)->required();
  feat->add_option("--mask", mask)->required();
  feat->add_option("--truth", truth, "Semantic ground truth; adds a class column");
  feat->add_option("--id", id, "Patient id written to the table")->required();
  feat->add_option("--min-overlap", min_overlap);
  add_common(feat, false);

  auto* ctrain = app.add_subcommand("classify-train", "Train the tumour-type SVM");
  ctrain->add_option("--features", features, "Feature CSV with a class column")->required();
  ctrain->add_option("--C", C);
  add_common(ctrain, false);

  auto* capply = app.add_subcommand("classify-apply", "Predict tumour types");
  capply->add_option("--model", model_path)->required();
  capply->add_option("--features", features)->required();
  add_common(capply, false);

  auto* sfit = app.add_subcommand("surv-fit", "Fit a Weibull AFT or Cox PH model");
  sfit->add_option("--cohort", cohort)->required();
  sfit->add_option("--model", kind)->check(CLI::IsMember({"weibull", "cox"}));
  sfit->add_option("--columns", columns, "Comma-separated covariates (default: all)");
  add_common(sfit, false);

  auto* sweep = app.add_subcommand("surv-sweep", "Validation C-index per covariate subset");
  sweep->add_option("--train", train_csv)->required();
  sweep->add_option("--val", val_csv)->required();
  sweep->add_option("--set", columns_sets, "Comma-separated subset (repeatable)")->required();
  sweep->add_option("--model", kind)->check(CLI::IsMember({"weibull", "cox"}));
  add_common(sweep, false);

  auto* mtrain = app.add_subcommand("mtlr-train", "Train the neural survival model on a cohort");
  mtrain->add_option("--data", data, "Cohort directory (images/, masks/, ehr.csv)");
  mtrain->add_option("--model", nn_model)->check(CLI::IsMember({"multi_patch", "deep_fusion"}));
  add_common(mtrain, true);

  auto* ens = app.add_subcommand("ensemble", "Average two risk tables");
  ens->add_option("--a", risk_a, "CSV with patient_id,risk")->required();
  ens->add_option("--b", risk_b, "CSV with patient_id,risk")->required();
  ens->add_option("--cohort", cohort, "Cohort CSV for the C-index");
  ens->add_flag("--raw", c.raw, "Plain mean instead of z-score mean");
  add_common(ens, false);

  auto* eval = app.add_subcommand("evaluate", "Aggregated Dice of semantic masks");
  eval->add_option("--pred", preds)->required();
  eval->add_option("--truth", truths)->required();
  add_common(eval, false);

  auto* spl = app.add_subcommand("split", "Per-centre train/validation split");
  spl->add_option("--ids", ids_path, "CSV with a patient_id column, or one id per line")->required();
  spl->add_option("--val-frac", val_frac);
  add_common(spl, false);

  auto* syn = app.add_subcommand("synth", "Generate a synthetic cohort and its pipeline config");
  syn->add_option("--patients", patients);
  syn->add_option("--censoring", censoring);
  add_common(syn, true);

  auto* run = app.add_subcommand("run", "Run the configured pipeline");
  run->add_option("--data", data, "Cohort directory (images/, masks/, ehr.csv)");
  run->add_flag("--raw", c.raw, "Plain-mean ensembling");
  add_common(run, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*loc) {
      const Volume v_ct = load(ct, Modality::CT), v_pet = load(pet, Modality::PET);
      Localization l;
      try {
        l = localize(v_ct, v_pet);
      } catch (const DetectionError& e) {
        std::cerr << "error: [localize] " << e.what() << '\n';
        return kExitStage;
      }
      const auto& b = l.box;
      emit_json(c.out, {{"min_corner_mm", {b.min_corner_mm[0], b.min_corner_mm[1], b.min_corner_mm[2]}},
                        {"size_mm", {b.size_mm[0], b.size_mm[1], b.size_mm[2]}},
                        {"landmarks",
                         {{"head_top_mm", l.landmarks.head_top_mm},
                          {"brain_peak_mm", l.landmarks.brain_peak_mm},
                          {"neck_drop_mm", l.landmarks.neck_drop_mm}}}});
      if (!profile.empty()) {
        csv::Table t;
        t.header = {"z_mm", "ct_mean", "pet_mean"};
        for (std::size_t k = 0; k < l.ct_profile.size(); ++k)
          t.rows.push_back({csv::format(l.ct_profile.z_of(k)), csv::format(l.ct_profile.values[k]),
                            csv::format(l.pet_profile.values[k])});
        emit_csv(profile, t);
      }
    } else if (*feat) {
      const Volume v_ct = load(ct, Modality::CT), v_pet = load(pet, Modality::PET), v_mask = load(mask, Modality::Mask);
      if (!v_mask.same_grid(v_ct) || !v_pet.same_grid(v_ct))
        throw IngestionError("features: CT, PET and mask must share a grid");
      const LabelMap lm = connected_components(v_mask);
      const auto regions = all_region_descriptors(lm, v_ct, v_pet);
      std::vector<int> cls;
      if (!truth.empty()) cls = component_truth_labels(lm, load(truth, Modality::Mask), min_overlap);
      emit_csv(c.out, region_table(id, regions, truth.empty() ? nullptr : &cls));
    } else if (*ctrain) {
      const csv::Table t = csv::read(features);
      const int cc = t.require("class");
      std::vector<int> y;
      for (const auto& r : t.rows) y.push_back(static_cast<int>(csv::to_double(r[static_cast<std::size_t>(cc)], "class")));
      SvmOptions o;
      o.C = C;
      o.seed = resolve_seed(c, 2);
      emit_json(c.out, to_json(svm_train(feature_rows(t), y, o)));
    } else if (*capply) {
      std::ifstream in(model_path);
      if (!in) throw IngestionError("cannot open " + model_path);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw FormatError(model_path + ": " + e.what());
      }
      const SvmModel m = svm_from_json(j);
      const csv::Table t = csv::read(features);
      const auto X = feature_rows(t);
      const int pid = t.column("patient_id"), lab = t.column("label");
      csv::Table o;
      o.header = {"patient_id", "label", "predicted"};
      for (std::size_t i = 0; i < X.size(); ++i)
        o.rows.push_back({pid >= 0 ? t.rows[i][static_cast<std::size_t>(pid)] : "",
                          lab >= 0 ? t.rows[i][static_cast<std::size_t>(lab)] : std::to_string(i + 1),
                          std::to_string(svm_predict(m, X[i]))});
      emit_csv(c.out, o);
    } else if (*sfit) {
      CohortTable tbl = read_cohort_csv(cohort);
      if (!columns.empty()) tbl = tbl.select(split_list(columns));
      tbl = impute_missing(tbl);
      if (kind == "cox") {
        const CoxModel m = fit_cox_ph(tbl);
        json j = to_json(m);
        j["training_cindex"] = concordance_index(predict_risks(m, tbl), tbl.time, tbl.event);
        emit_json(c.out, j);
      } else {
        const WeibullAftModel m = fit_weibull_aft(tbl);
        json j = to_json(m);
        j["training_cindex"] = concordance_index(predict_risks(m, tbl), tbl.time, tbl.event);
        emit_json(c.out, j);
      }
    } else if (*sweep) {
      std::vector<std::vector<std::string>> sets;
      for (const auto& s : columns_sets) sets.push_back(split_list(s));
      const auto rows = calibration_sweep(read_cohort_csv(train_csv), read_cohort_csv(val_csv), sets,
                                          kind == "cox" ? SurvivalModelKind::Cox : SurvivalModelKind::Weibull);
      csv::Table t;
      t.header = {"features", "cindex", "error"};
      for (const auto& r : rows) {
        std::string names;
        for (const auto& s : r.subset) names += (names.empty() ? "" : "+") + s;
        t.rows.push_back({names, r.ok ? csv::format(r.c_index) : "", r.error});
      }
      emit_csv(c.out, t);
    } else if (*mtrain) {
      json cfg = load_run_config(c, data);
      for (auto& [k, v] : cfg["stages"].items()) v = k == "neural";
      if (!nn_model.empty()) cfg["neural"]["model"] = nn_model;
      return report(run_pipeline(cfg));
    } else if (*ens) {
      std::vector<std::string> order;
      const auto a = read_risks(risk_a, &order);
      const auto b = read_risks(risk_b, nullptr);
      std::vector<double> ra, rb;
      for (const auto& pid : order) {
        const auto it = b.find(pid);
        if (it == b.end()) throw IngestionError("ensemble: " + pid + " missing from " + risk_b);
        ra.push_back(a.at(pid));
        rb.push_back(it->second);
      }
      std::vector<std::string> warnings;
      const auto r = nn::ensemble_risk(ra, rb, c.raw ? nn::EnsembleMode::RawMean : nn::EnsembleMode::ZScoreMean, &warnings);
      for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
      csv::Table t;
      t.header = {"patient_id", "risk"};
      for (std::size_t i = 0; i < order.size(); ++i) t.rows.push_back({order[i], csv::format(r[i])});
      emit_csv(c.out, t);
      if (!cohort.empty()) {
        const CohortTable tbl = read_cohort_csv(cohort);
        std::vector<double> rr, tt;
        std::vector<int> ee;
        for (std::size_t i = 0; i < tbl.rows(); ++i) {
          const auto it = std::find(order.begin(), order.end(), tbl.patient_ids[i]);
          if (it == order.end()) continue;
          rr.push_back(r[static_cast<std::size_t>(it - order.begin())]);
          tt.push_back(tbl.time[i]);
          ee.push_back(tbl.event[i]);
        }
        std::cerr << "cindex " << csv::format(concordance_index(rr, tt, ee)) << '\n';
      }
    } else if (*eval) {
      if (preds.size() != truths.size()) throw ArgumentError("evaluate: --pred and --truth counts differ");
      std::vector<Volume> p, t;
      for (const auto& f : preds) p.push_back(load(f, Modality::Mask));
      for (const auto& f : truths) t.push_back(load(f, Modality::Mask));
      const auto s = evaluate_segmentation(p, t);
      emit_json(c.out, {{"dice_gtvp", s.dice_gtvp}, {"dice_gtvn", s.dice_gtvn}, {"aggregated_dice", s.aggregated}});
    } else if (*spl) {
      std::vector<std::string> ids;
      std::ifstream in(ids_path);
      if (!in) throw IngestionError("cannot open " + ids_path);
      std::string first;
      std::getline(in, first);
      if (first.find(',') != std::string::npos || first == "patient_id") {
        const csv::Table t = csv::read(ids_path);
        const int col = t.require("patient_id");
        for (const auto& r : t.rows) ids.push_back(r[static_cast<std::size_t>(col)]);
      } else {
        in.clear();
        in.seekg(0);
        for (std::string line; std::getline(in, line);) {
          if (!line.empty() && line.back() == '\r') line.pop_back();
          if (!line.empty()) ids.push_back(line);
        }
      }
      const auto s = split_cohort(ids, resolve_seed(c, 1), val_frac);
      csv::Table t;
      t.header = {"patient_id", "centre", "split"};
      for (const auto& pid : ids) t.rows.push_back({pid, s.centre.at(pid), s.split.at(pid)});
      emit_csv(c.out, t);
    } else if (*syn) {
      if (c.out.empty()) throw ConfigError("synth: --out DIR is required");
      json cfg = load_config(c.config, c.overrides);
      const auto& sc = cfg["synthetic"];
      SyntheticSpec spec;
      spec.n_patients = patients > 0 ? patients : sc["patients"].get<int>();
      spec.censoring_rate = censoring >= 0.0 ? censoring : sc["censoring_rate"].get<double>();
      spec.missing_rate = sc["missing_rate"];
      const std::uint64_t seed = resolve_seed(c, sc["seed"].get<std::uint64_t>());
      write_synthetic_cohort(make_synthetic_cohort(seed, spec), c.out);
      cfg["paths"] = {{"images", "images"}, {"masks", "masks"}, {"ehr", "ehr.csv"}, {"out", "out"}};
      cfg["synthetic"]["seed"] = seed;
      cfg["synthetic"]["patients"] = spec.n_patients;
      cfg["synthetic"]["censoring_rate"] = spec.censoring_rate;
      write_json((fs::path(c.out) / "pipeline.json").string(), cfg);
      std::cout << "wrote " << spec.n_patients << " patients to " << c.out << '\n';
    } else if (*run) {
      return report(run_pipeline(load_run_config(c, data)));
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IngestionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const UnsupportedError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitStage;
  }
  return kExitOk;
}
