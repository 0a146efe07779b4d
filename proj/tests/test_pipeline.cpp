#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "progkit/pipeline.hpp"

using namespace progkit;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> make_ids(const std::vector<std::pair<std::string, int>>& centres) {
  std::vector<std::string> ids;
  for (const auto& [c, n] : centres)
    for (int i = 1; i <= n; ++i) ids.push_back(c + "-" + std::to_string(i));
  return ids;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("progkit_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Volume labels(Dims d, const std::vector<float>& v) {
  Volume out(d, {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}, Modality::Mask);
  auto data = out.data();
  std::copy(v.begin(), v.end(), data.begin());
  return out;
}

}  // namespace

TEST(Split, SevenCentresCountsAndDisjointUnion) {
  const auto ids = make_ids({{"CHUM", 56}, {"CHUP", 72}, {"CHUS", 72}, {"HGJ", 55}, {"HMR", 18}, {"MDA", 197}, {"USZ", 54}});
  ASSERT_EQ(ids.size(), 524u);
  const SplitAssignment s = split_cohort(ids, 5, 79.0 / 524.0);
  EXPECT_EQ(s.train().size(), 445u);
  EXPECT_EQ(s.validation().size(), 79u);
  std::set<std::string> all;
  for (const auto& id : s.train()) all.insert(id);
  for (const auto& id : s.validation()) EXPECT_TRUE(all.insert(id).second);
  EXPECT_EQ(all.size(), ids.size());

  std::map<std::string, int> n, v;
  for (const auto& id : ids) {
    n[s.centre.at(id)]++;
    v[s.centre.at(id)] += s.split.at(id) == "validation";
  }
  for (const auto& [c, count] : n) EXPECT_LE(std::abs(v[c] - 79.0 / 524.0 * count), 1.0) << c;
}

TEST(Split, SingleCentre) {
  const auto s = split_cohort(make_ids({{"MDA", 10}}), 1, 0.2);
  EXPECT_EQ(s.train().size(), 8u);
  EXPECT_EQ(s.validation().size(), 2u);
}

TEST(Split, Deterministic) {
  const auto ids = make_ids({{"A", 13}, {"B", 7}, {"C", 21}});
  const auto a = split_cohort(ids, 42, 0.3), b = split_cohort(ids, 42, 0.3);
  EXPECT_EQ(a.split, b.split);
  bool differs = false;
  for (std::uint64_t seed = 43; seed < 53 && !differs; ++seed) differs = split_cohort(ids, seed, 0.3).split != a.split;
  EXPECT_TRUE(differs);
}

TEST(Split, PerCentreWithinOne) {
  std::mt19937 gen(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::pair<std::string, int>> c;
    const int k = 1 + static_cast<int>(gen() % 6);
    for (int i = 0; i < k; ++i) c.push_back({"C" + std::to_string(i), 1 + static_cast<int>(gen() % 40)});
    const double f = 0.05 + 0.9 * static_cast<double>(gen() % 1000) / 1000.0;
    const auto ids = make_ids(c);
    const auto s = split_cohort(ids, gen(), f);
    for (const auto& [centre, count] : c) {
      int v = 0;
      for (const auto& id : ids)
        if (s.centre.at(id) == centre) v += s.split.at(id) == "validation";
      EXPECT_LE(std::abs(v - f * count), 1.0) << centre;
    }
  }
}

TEST(Split, Errors) {
  try {
    split_cohort({"MDA-1", "nodash", "-x", "MDA-1"}, 1, 0.2);
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("nodash"), std::string::npos);
    EXPECT_NE(msg.find("-x"), std::string::npos);
    EXPECT_NE(msg.find("duplicate"), std::string::npos);
  }
  EXPECT_THROW(split_cohort({"MDA-1", ""}, 1, 0.2), IngestionError);
  EXPECT_THROW(split_cohort({}, 1, 0.2), ArgumentError);
  EXPECT_THROW(split_cohort({"A-1"}, 1, 0.0), ArgumentError);
  EXPECT_THROW(split_cohort({"A-1"}, 1, 1.0), ArgumentError);
  EXPECT_EQ(centre_of("MDA-036"), "MDA");
  EXPECT_THROW(centre_of("MDA"), IngestionError);
}

TEST(Dice, PerfectAndEmpty) {
  const Dims d{2, 2, 2};
  const Volume a = labels(d, {0, 1, 1, 2, 0, 0, 2, 1});
  const auto s = evaluate_segmentation(std::vector<Volume>{a}, std::vector<Volume>{a});
  EXPECT_EQ(s.dice_gtvp, 1.0);
  EXPECT_EQ(s.dice_gtvn, 1.0);
  EXPECT_EQ(s.aggregated, 1.0);

  const Volume bg = labels(d, std::vector<float>(8, 0.0f));
  const auto z = evaluate_segmentation(std::vector<Volume>{bg}, std::vector<Volume>{a});
  EXPECT_EQ(z.dice_gtvp, 0.0);
  EXPECT_EQ(z.dice_gtvn, 0.0);
  EXPECT_EQ(z.aggregated, 0.0);

  const auto e = evaluate_segmentation(std::vector<Volume>{bg}, std::vector<Volume>{bg});
  EXPECT_EQ(e.aggregated, 1.0);
}

TEST(Dice, TwoPatientHandCount) {
  // Patient 1: class 1 pred {0,1,2}, truth {1,2,3}; class 2 pred {6}, truth {6,7}.
  // Patient 2: class 1 pred {0}, truth {}; class 2 pred {}, truth {5}.
  const Dims d{1, 2, 4};
  const Volume p1 = labels(d, {1, 1, 1, 0, 0, 0, 2, 0});
  const Volume g1 = labels(d, {0, 1, 1, 1, 0, 0, 2, 2});
  const Volume p2 = labels(d, {1, 0, 0, 0, 0, 0, 0, 0});
  const Volume g2 = labels(d, {0, 0, 0, 0, 0, 2, 0, 0});
  const auto s = evaluate_segmentation(std::vector<Volume>{p1, p2}, std::vector<Volume>{g1, g2});
  EXPECT_DOUBLE_EQ(s.dice_gtvp, 2.0 * 2 / (4 + 3));
  EXPECT_DOUBLE_EQ(s.dice_gtvn, 2.0 * 1 / (1 + 3));
  EXPECT_DOUBLE_EQ(s.aggregated, 0.5 * (4.0 / 7.0 + 0.5));
}

TEST(Dice, RandomFixturesMatchVoxelOracle) {
  std::mt19937 gen(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + static_cast<int>(gen() % 4);
    std::vector<Volume> pred, truth;
    std::array<long long, 3> inter{}, ps{}, ts{};
    for (int i = 0; i < n; ++i) {
      const Dims d{1 + gen() % 5, 1 + gen() % 5, 1 + gen() % 5};
      std::vector<float> a(d.count()), b(a.size());
      for (std::size_t v = 0; v < a.size(); ++v) {
        a[v] = static_cast<float>(gen() % 3);
        b[v] = static_cast<float>(gen() % 3);
        for (int c = 1; c <= 2; ++c) {
          ps[c] += a[v] == c;
          ts[c] += b[v] == c;
          inter[c] += a[v] == c && b[v] == c;
        }
      }
      pred.push_back(labels(d, a));
      truth.push_back(labels(d, b));
    }
    auto oracle = [&](int c) { return ps[c] + ts[c] == 0 ? 1.0 : 2.0 * inter[c] / static_cast<double>(ps[c] + ts[c]); };
    const auto s = evaluate_segmentation(pred, truth);
    EXPECT_EQ(s.dice_gtvp, oracle(1));
    EXPECT_EQ(s.dice_gtvn, oracle(2));
    EXPECT_EQ(s.aggregated, 0.5 * (oracle(1) + oracle(2)));

    std::reverse(pred.begin(), pred.end());
    std::reverse(truth.begin(), truth.end());
    EXPECT_EQ(evaluate_segmentation(pred, truth).aggregated, s.aggregated);
  }
}

TEST(Dice, Errors) {
  const Volume a = labels({1, 1, 2}, {0, 1});
  const Volume b = labels({1, 2, 1}, {0, 1});
  const Volume bad = labels({1, 1, 2}, {0, 3});
  EXPECT_THROW(evaluate_segmentation(std::vector<Volume>{a}, std::vector<Volume>{b}), ArgumentError);
  EXPECT_THROW(evaluate_segmentation(std::vector<Volume>{a}, std::vector<Volume>{}), ArgumentError);
  EXPECT_THROW(evaluate_segmentation(std::vector<Volume>{bad}, std::vector<Volume>{a}), ArgumentError);
}

TEST(Synthetic, NoCensoringMeansAllEvents) {
  SyntheticSpec spec;
  spec.n_patients = 6;
  spec.censoring_rate = 0.0;
  spec.dims = {120, 40, 40};
  const auto c = make_synthetic_cohort(4, spec);
  ASSERT_EQ(c.patients.size(), 6u);
  for (const auto& p : c.patients) EXPECT_EQ(p.event, 1) << p.id;
}

TEST(Synthetic, CensoringMatchesRate) {
  Rng rng(9);
  std::vector<double> t(1000);
  for (double& v : t) v = rng.uniform(1.0, 100.0);
  std::vector<int> e;
  apply_censoring(t, e, 0.3, rng);
  EXPECT_EQ(std::count(e.begin(), e.end(), 0), 300);
}

TEST(Synthetic, ByteIdenticalForFixedSeed) {
  SyntheticSpec spec;
  spec.n_patients = 2;
  spec.dims = {120, 40, 40};
  const fs::path a = scratch("synth_a"), b = scratch("synth_b");
  write_synthetic_cohort(make_synthetic_cohort(17, spec), a.string());
  write_synthetic_cohort(make_synthetic_cohort(17, spec), b.string());
  int files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a);
    ASSERT_TRUE(fs::exists(b / rel)) << rel;
    EXPECT_EQ(slurp(entry.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 4);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Config, OverridesAndErrors) {
  nlohmann::json cfg = default_config();
  apply_override(cfg, "neural.epochs=5");
  apply_override(cfg, "ensemble.mode=raw_mean");
  EXPECT_EQ(cfg["neural"]["epochs"], 5);
  EXPECT_EQ(cfg["ensemble"]["mode"], "raw_mean");
  EXPECT_THROW(apply_override(cfg, "neural.nope=1"), ConfigError);
  EXPECT_THROW(apply_override(cfg, "neural.epochs=\"x\""), ConfigError);
  EXPECT_THROW(apply_override(cfg, "novalue"), ConfigError);
  apply_seed(cfg, 99);
  for (const auto& [k, v] : cfg["seeds"].items()) EXPECT_EQ(v, 99) << k;

  nlohmann::json bad = default_config();
  bad["split"]["val_frac"] = 1.5;
  EXPECT_THROW(validate_config(bad), ConfigError);
  bad = default_config();
  bad["neural"]["model"] = "transformer";
  EXPECT_THROW(validate_config(bad), ConfigError);
  bad = default_config();
  bad["survival"]["descriptor_columns"] = {"colour"};
  EXPECT_THROW(validate_config(bad), ConfigError);

  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
  const fs::path dir = scratch("config");
  std::ofstream(dir / "c.json") << R"({"paths": {"ehr": "data/ehr.csv"}, "neural": {"epochs": 7}})";
  const auto loaded = load_config((dir / "c.json").string(), {"neural.lr=0.5"});
  EXPECT_EQ(loaded["neural"]["epochs"], 7);
  EXPECT_EQ(loaded["neural"]["lr"], 0.5);
  EXPECT_EQ(fs::path(loaded["paths"]["ehr"].get<std::string>()), (dir / "data/ehr.csv").lexically_normal());
  EXPECT_EQ(config_hash(loaded), config_hash(loaded));
  fs::remove_all(dir);
}

TEST(Run, AllStagesDisabledWritesOnlyManifest) {
  const fs::path dir = scratch("run_empty");
  nlohmann::json cfg = {{"paths", {{"out", (dir / "out").string()}, {"images", "/nonexistent"}}}};
  for (const char* s : {"localize", "features", "classify", "evaluate", "survival", "neural", "ensemble"})
    cfg["stages"][s] = false;
  const RunResult r = run_pipeline(cfg);
  EXPECT_EQ(r.exit_code, kExitOk) << r.message;
  EXPECT_TRUE(r.files.empty());
  std::vector<std::string> found;
  for (const auto& e : fs::recursive_directory_iterator(dir / "out")) found.push_back(e.path().filename().string());
  EXPECT_EQ(found, std::vector<std::string>{"manifest.json"});
  fs::remove_all(dir);
}

TEST(Run, MissingEhrIsDataError) {
  const fs::path dir = scratch("run_noehr");
  const std::string ehr = (dir / "absent.csv").string();
  nlohmann::json cfg = {{"paths", {{"out", (dir / "out").string()}, {"ehr", ehr}, {"images", (dir / "img").string()}}}};
  const RunResult r = run_pipeline(cfg);
  EXPECT_EQ(r.exit_code, kExitData);
  EXPECT_NE(r.message.find(ehr), std::string::npos) << r.message;
  EXPECT_TRUE(fs::exists(dir / "out" / "manifest.json"));
  fs::remove_all(dir);
}

TEST(Run, BadConfigIsConfigError) {
  const RunResult r = run_pipeline({{"neural", {{"epochs", 0}}}});
  EXPECT_EQ(r.exit_code, kExitConfig);
  EXPECT_EQ(run_pipeline({{"bogus", 1}}).exit_code, kExitConfig);
}

TEST(ParallelMap, OrderAndFirstError) {
  const auto v = parallel_map<int>(50, 4, [](std::size_t i) { return static_cast<int>(i * i); });
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v[i], static_cast<int>(i * i));
  try {
    parallel_map<int>(10, 3, [](std::size_t i) -> int {
      if (i == 3 || i == 7) throw ArgumentError("fail " + std::to_string(i));
      return 0;
    });
    FAIL();
  } catch (const ArgumentError& e) {
    EXPECT_STREQ(e.what(), "fail 3");
  }
}
