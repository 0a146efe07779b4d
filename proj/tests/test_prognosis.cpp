#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "progkit/nn.hpp"

using namespace progkit;
using namespace progkit::nn;

namespace {

ModelConfig tiny(ModelKind kind = ModelKind::MultiPatch) {
  ModelConfig c;
  c.kind = kind;
  c.patch = kind == ModelKind::MultiPatch ? Dims{5, 5, 5} : Dims{5, 6, 7};
  c.channels = 3;
  c.embed = 4;
  c.graph_width = 5;
  c.hidden = 6;
  c.n_descriptors = 2;
  c.n_ehr = 2;
  c.K = 3;
  c.conv_float32 = false;
  return c;
}

TimeBins three_bins() { return TimeBins({10.0, 20.0, 30.0}); }

Volume noise(Dims d, Rng& rng) {
  Volume v(d, {1, 1, 1}, {0, 0, 0}, Modality::Fused);
  for (float& x : v.data()) x = static_cast<float>(rng.normal());
  return v;
}

Sample graph_sample(const ModelConfig& c, Rng& rng, int nodes, double t, int e) {
  Sample s;
  s.id = "s";
  s.graph.descriptors = Mat(nodes, c.n_descriptors);
  for (int k = 0; k < nodes; ++k) {
    s.graph.patches.push_back(noise(c.patch, rng));
    for (int d = 0; d < c.n_descriptors; ++d) s.graph.descriptors(k, d) = rng.normal();
  }
  s.ehr = Vec(c.n_ehr);
  for (int d = 0; d < c.n_ehr; ++d) s.ehr(d) = rng.normal();
  s.time = t;
  s.event = e;
  return s;
}

Sample fusion_sample(const ModelConfig& c, Rng& rng, double t, int e) {
  Sample s;
  s.id = "f";
  s.roi_patch = noise(c.patch, rng);
  s.ehr = Vec(c.n_ehr);
  for (int d = 0; d < c.n_ehr; ++d) s.ehr(d) = rng.normal();
  s.time = t;
  s.event = e;
  return s;
}

// All 2^K label vectors, kept when monotone non-decreasing.
std::vector<std::vector<int>> monotone_sequences(int K) {
  std::vector<std::vector<int>> out;
  for (int mask = 0; mask < (1 << K); ++mask) {
    std::vector<int> y(static_cast<std::size_t>(K));
    for (int j = 0; j < K; ++j) y[static_cast<std::size_t>(j)] = (mask >> j) & 1;
    if (std::is_sorted(y.begin(), y.end())) out.push_back(y);
  }
  return out;
}

// Central differences carry ~1e-10 absolute noise on O(1) losses, so tiny
// gradients are compared against a floor instead of their own norm.
double max_rel_error(const Mat& analytic, const Mat& numeric) {
  const double denom = std::max({analytic.norm(), numeric.norm(), 1e-6});
  return (analytic - numeric).norm() / denom;
}

// Central differences of batch_loss with respect to every parameter entry.
void check_model_gradient(Model m, const std::vector<const Sample*>& batch) {
  Tensors g = zeros_like(m.params.w);
  batch_loss(m, batch, true, &g);
  const double h = 1e-5;
  for (auto& [name, w] : m.params.w) {
    Mat fd(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const double keep = w.data()[i];
      w.data()[i] = keep + h;
      const double lp = batch_loss(m, batch, true);
      w.data()[i] = keep - h;
      const double lm = batch_loss(m, batch, true);
      w.data()[i] = keep;
      fd.data()[i] = (lp - lm) / (2.0 * h);
    }
    EXPECT_LT(max_rel_error(g.at(name), fd), 1e-4) << name;
  }
}

}  // namespace

TEST(TimeBins, NearestRankQuantiles) {
  EXPECT_EQ(make_time_bins({10, 20, 30, 40}, {1, 1, 1, 1}, 2).edges, (std::vector<double>{20, 40}));
  EXPECT_EQ(make_time_bins({10, 50, 30, 40}, {1, 0, 1, 1}, 1).edges, (std::vector<double>{40}));
  const TimeBins same = make_time_bins({5, 5, 5, 5}, {1, 1, 1, 1}, 3);
  EXPECT_DOUBLE_EQ(same.edges[0], 5.0);
  EXPECT_GT(same.edges[1], same.edges[0]);
  EXPECT_GT(same.edges[2], same.edges[1]);
  EXPECT_THROW(make_time_bins({1, 2}, {0, 0}, 1), ArgumentError);
  EXPECT_THROW(make_time_bins({1, 2}, {1, 1}, 0), ArgumentError);
  EXPECT_EQ(default_bin_count(10), 4);
  EXPECT_EQ(default_bin_count(16), 4);
}

TEST(TimeBins, BinOf) {
  const TimeBins b = three_bins();
  EXPECT_EQ(b.bin_of(5.0), 1);
  EXPECT_EQ(b.bin_of(10.0), 1);
  EXPECT_EQ(b.bin_of(10.5), 2);
  EXPECT_EQ(b.bin_of(30.0), 3);
  EXPECT_EQ(b.bin_of(31.0), 4);
}

TEST(Mtlr, ProbabilitiesMatchEnumeration) {
  Rng rng(1);
  for (int K = 1; K <= 12; ++K) {
    Eigen::VectorXd f(K);
    for (int j = 0; j < K; ++j) f(j) = rng.normal(0.0, 2.0);
    const auto seqs = monotone_sequences(K);
    ASSERT_EQ(seqs.size(), static_cast<std::size_t>(K + 1));
    std::vector<double> w;
    double z = 0.0;
    for (const auto& y : seqs) {
      double s = 0.0;
      for (int j = 0; j < K; ++j) s += y[static_cast<std::size_t>(j)] * f(j);
      w.push_back(std::exp(s));
      z += w.back();
    }
    const Eigen::VectorXd p = sequence_probabilities(f);
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    for (const auto& y : seqs) {
      // first one at position m (1-based), K+1 for all zeros
      const auto first = std::find(y.begin(), y.end(), 1) - y.begin();
      const double want = w[static_cast<std::size_t>(&y - seqs.data())] / z;
      EXPECT_NEAR(p(first), want, 1e-12) << "K=" << K;
    }
  }
}

TEST(Mtlr, HandCases) {
  const TimeBins b({1.0, 2.0});
  const Eigen::VectorXd f = Eigen::VectorXd::Zero(2);
  EXPECT_NEAR(mtlr_loss(f, 0.5, 1, b).loss, std::log(3.0), 1e-12);
  EXPECT_NEAR(mtlr_loss(f, 0.5, 0, b).loss, std::log(1.5), 1e-12);
  EXPECT_NEAR(mtlr_loss(f, 3.0, 1, b).loss, std::log(3.0), 1e-12);
  EXPECT_NEAR(mtlr_loss(f, 3.0, 0, b).loss, std::log(3.0), 1e-12);
  EXPECT_THROW(mtlr_loss(f, 0.0, 1, b), ArgumentError);
  EXPECT_THROW(mtlr_loss(Eigen::VectorXd::Zero(3), 1.0, 1, b), ArgumentError);
}

TEST(Mtlr, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  const TimeBins b({3.0, 6.0, 9.0, 12.0, 15.0});
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd f(5);
    for (int j = 0; j < 5; ++j) f(j) = rng.normal(0.0, 1.5);
    const double t = rng.uniform(0.5, 18.0);
    const int e = trial % 2;
    const MtlrLoss l = mtlr_loss(f, t, e, b);
    Eigen::VectorXd fd(5);
    for (int j = 0; j < 5; ++j) {
      Eigen::VectorXd a = f, c = f;
      a(j) += 1e-6;
      c(j) -= 1e-6;
      fd(j) = (mtlr_loss(a, t, e, b).loss - mtlr_loss(c, t, e, b).loss) / 2e-6;
    }
    EXPECT_LT(max_rel_error(l.grad, fd), 1e-4) << trial;
  }
}

TEST(Mtlr, RiskAndSurvival) {
  const TimeBins b({1.0, 2.0});
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(2);
  const auto s = mtlr_survival(zero);
  EXPECT_NEAR(s[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(s[1], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(mtlr_risk(zero, b), -1.0, 1e-12);
  // Mass on the earliest bin: every sequence but the first vanishes.
  EXPECT_NEAR(mtlr_risk((Eigen::VectorXd(2) << 40.0, 0.0).finished(), b), 0.0, 1e-12);
  // Raising the last logit alone lifts every sequence except "no event",
  // so survival past the last edge falls and risk rises.
  Eigen::VectorXd up = zero;
  up(1) = 1.0;
  EXPECT_GT(mtlr_risk(up, b), mtlr_risk(zero, b));
  EXPECT_LT(mtlr_survival(up)[1], s[1]);
}

TEST(Encoder, ZeroPatchZeroBiasesGiveZero) {
  Model m = make_model(tiny(), three_bins(), 1);
  const Volume z(m.config.patch, {1, 1, 1}, {0, 0, 0}, Modality::Fused, 0.0f);
  EXPECT_LT(conv_encode(m, z).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Encoder, CentreKernelOnConstantPatch) {
  ModelConfig c = tiny();
  c.batch_norm = false;
  c.embed = c.channels;
  Model m = make_model(c, three_bins(), 1);
  m.params.w["conv.weight"].setZero();
  m.params.w["conv.weight"].col(13).setOnes();
  m.params.w["proj.weight"] = Mat::Identity(c.channels, c.channels);
  const Volume v(c.patch, {1, 1, 1}, {0, 0, 0}, Modality::Fused, 2.5f);
  const Vec e = conv_encode(m, v);
  for (Eigen::Index i = 0; i < e.size(); ++i) EXPECT_NEAR(e(i), 2.5, 1e-12);
}

TEST(Encoder, WrongPatchDims) {
  Model m = make_model(tiny(), three_bins(), 1);
  const Volume v({5, 5, 6}, {1, 1, 1}, {0, 0, 0}, Modality::Fused, 0.0f);
  EXPECT_THROW(conv_encode(m, v), ArgumentError);
}

TEST(Encoder, Float32MatchesFloat64) {
  Rng rng(4);
  ModelConfig c = tiny();
  c.patch = {12, 12, 12};
  Model m64 = make_model(c, three_bins(), 3);
  c.conv_float32 = true;
  Model m32 = m64;
  m32.config = c;
  const Volume v = noise(c.patch, rng);
  EXPECT_LT((conv_encode(m64, v) - conv_encode(m32, v)).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Gradients, MultiPatchBatch) {
  Rng rng(5);
  const ModelConfig c = tiny();
  const Sample a = graph_sample(c, rng, 3, 15.0, 1), b = graph_sample(c, rng, 1, 25.0, 0),
               d = graph_sample(c, rng, 2, 40.0, 1);
  Model m = make_model(c, three_bins(), 6);
  check_model_gradient(m, {&a, &b, &d});
}

TEST(Gradients, MultiPatchWithoutBatchNorm) {
  Rng rng(6);
  ModelConfig c = tiny();
  c.batch_norm = false;
  const Sample a = graph_sample(c, rng, 2, 5.0, 1), b = graph_sample(c, rng, 2, 22.0, 0);
  check_model_gradient(make_model(c, three_bins(), 7), {&a, &b});
}

TEST(Gradients, DeepFusionTwoSamples) {
  Rng rng(7);
  const ModelConfig c = tiny(ModelKind::DeepFusion);
  const Sample a = fusion_sample(c, rng, 12.0, 1), b = fusion_sample(c, rng, 28.0, 0);
  check_model_gradient(make_model(c, three_bins(), 8), {&a, &b});
}

TEST(Gat, DenseOracleAndRowSums) {
  Rng rng(9);
  const Eigen::Index n = 3, d = 4, dp = 5;
  Mat H(n, d), W(dp, 2 * d);
  Vec a(dp);
  for (Eigen::Index i = 0; i < H.size(); ++i) H.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = rng.normal();
  GatCache cache;
  const Mat out = gatv2_layer(H, W, a, 0.2, &cache);
  for (Eigen::Index i = 0; i < n; ++i) EXPECT_NEAR(cache.alpha.row(i).sum(), 1.0, 1e-9);

  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> e(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < n; ++j) {
      Vec cat(2 * d);
      cat << H.row(i).transpose(), H.row(j).transpose();
      const Vec s = W * cat;
      double v = 0.0;
      for (Eigen::Index k = 0; k < dp; ++k) v += a(k) * (s(k) > 0 ? s(k) : 0.2 * s(k));
      e[static_cast<std::size_t>(j)] = v;
    }
    double z = 0.0;
    for (double v : e) z += std::exp(v);
    Vec h = Vec::Zero(dp);
    for (Eigen::Index j = 0; j < n; ++j)
      h += std::exp(e[static_cast<std::size_t>(j)]) / z * (W.rightCols(d) * H.row(j).transpose());
    for (Eigen::Index k = 0; k < dp; ++k) EXPECT_NEAR(out(i, k), std::max(0.0, h(k)), 1e-9);
  }
}

TEST(Gat, PermutationEquivariance) {
  Rng rng(10);
  const Eigen::Index n = 5, d = 3, dp = 4;
  Mat H(n, d), W(dp, 2 * d);
  Vec a(dp);
  for (Eigen::Index i = 0; i < H.size(); ++i) H.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = rng.normal();
  std::vector<Eigen::Index> perm{3, 0, 4, 1, 2};
  Mat PH(n, d);
  for (Eigen::Index i = 0; i < n; ++i) PH.row(i) = H.row(perm[static_cast<std::size_t>(i)]);
  const Mat out = gatv2_layer(H, W, a), pout = gatv2_layer(PH, W, a);
  for (Eigen::Index i = 0; i < n; ++i)
    EXPECT_LT((pout.row(i) - out.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Gat, SingleAndIdenticalNodes) {
  Mat W = Mat::Ones(2, 4);
  W(0, 2) = -1.0;
  const Vec a = Vec::Ones(2);
  const Mat H = (Mat(1, 2) << 1.0, 2.0).finished();
  GatCache c1;
  const Mat one = gatv2_layer(H, W, a, 0.2, &c1);
  EXPECT_DOUBLE_EQ(c1.alpha(0, 0), 1.0);
  const Vec expect = (W.rightCols(2) * H.row(0).transpose()).cwiseMax(0.0);
  EXPECT_NEAR(one(0, 0), expect(0), 1e-15);
  EXPECT_NEAR(one(0, 1), expect(1), 1e-15);
  GatCache c2;
  gatv2_layer((Mat(2, 2) << 1.0, 2.0, 1.0, 2.0).finished(), W, a, 0.2, &c2);
  EXPECT_TRUE(c2.alpha.isApproxToConstant(0.5, 1e-15));
  Adjacency no_self = complete_graph(2);
  no_self(1, 1) = false;
  EXPECT_THROW(gatv2_layer(Mat::Ones(2, 2), no_self, W, a), ArgumentError);
}

TEST(Gat, MaskedAdjacency) {
  Rng rng(11);
  Mat H(3, 2), W(3, 4);
  for (Eigen::Index i = 0; i < H.size(); ++i) H.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = rng.normal();
  const Vec a = Vec::Ones(3);
  Adjacency adj = Adjacency::Constant(3, 3, false);
  for (Eigen::Index i = 0; i < 3; ++i) adj(i, i) = true;
  GatCache c;
  const Mat out = gatv2_layer(H, adj, W, a, 0.2, &c);
  EXPECT_TRUE(c.alpha.isIdentity(1e-15));
  for (Eigen::Index i = 0; i < 3; ++i)
    EXPECT_LT((out.row(i).transpose() - (W.rightCols(2) * H.row(i).transpose()).cwiseMax(0.0)).norm(), 1e-15);
}

TEST(MultiPatch, NodeOrderDoesNotMatter) {
  Rng rng(12);
  const ModelConfig c = tiny();
  Model m = make_model(c, three_bins(), 13);
  const Sample s = graph_sample(c, rng, 4, 10.0, 1);
  TumorGraph g = s.graph;
  TumorGraph rev;
  rev.descriptors = Mat(4, c.n_descriptors);
  for (int k = 3; k >= 0; --k) {
    rev.patches.push_back(g.patches[static_cast<std::size_t>(k)]);
    rev.descriptors.row(3 - k) = g.descriptors.row(k);
  }
  const Prediction a = multi_patch_forward(m, g, s.ehr), b = multi_patch_forward(m, rev, s.ehr);
  EXPECT_NEAR(a.risk, b.risk, 1e-6);
  EXPECT_LT((a.logits - b.logits).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_THROW(multi_patch_forward(m, TumorGraph{}, s.ehr), ArgumentError);
  EXPECT_THROW(multi_patch_forward(m, g, Vec::Zero(5)), ArgumentError);
}

TEST(DeepFusion, ZeroFinalLayer) {
  const ModelConfig c = tiny(ModelKind::DeepFusion);
  Model m = make_model(c, three_bins(), 14);
  m.params.w["mlp2.weight"].setZero();
  const Volume z(c.patch, {1, 1, 1}, {0, 0, 0}, Modality::Fused, 0.0f);
  const Prediction p = deep_fusion_forward(m, z, Vec::Zero(c.n_ehr));
  EXPECT_TRUE(p.logits.isZero(0.0));
  EXPECT_DOUBLE_EQ(p.risk, mtlr_risk(Eigen::VectorXd::Zero(3), m.bins));
  EXPECT_EQ(default_patch(ModelKind::DeepFusion), (Dims{50, 80, 80}));
  const Volume wrong({5, 6, 8}, {1, 1, 1}, {0, 0, 0}, Modality::Fused, 0.0f);
  EXPECT_THROW(deep_fusion_forward(m, wrong, Vec::Zero(c.n_ehr)), ArgumentError);
}

TEST(Training, ScheduleDropsAtMilestones) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 0), 0.016);
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 59), 0.016);
  EXPECT_NEAR(learning_rate(cfg, 60), 0.0016, 1e-15);
  EXPECT_NEAR(learning_rate(cfg, 80), 0.00016, 1e-15);
}

TEST(Training, ZeroLearningRateKeepsParameters) {
  Rng rng(15);
  const ModelConfig c = tiny();
  std::vector<Sample> tr;
  for (int i = 0; i < 6; ++i) tr.push_back(graph_sample(c, rng, 1 + i % 2, 5.0 + 5.0 * i, i % 3 != 0));
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.seed = 3;
  const TrainResult r = train(c, tr, {}, three_bins(), cfg);
  const Model init = make_model(r.model.config, three_bins(), 3);
  for (const auto& [k, w] : r.model.params.w) EXPECT_EQ(w, init.params.w.at(k)) << k;
}

TEST(Training, SameSeedIsBitIdentical) {
  Rng rng(16);
  const ModelConfig c = tiny();
  std::vector<Sample> tr, va;
  for (int i = 0; i < 10; ++i) tr.push_back(graph_sample(c, rng, 1 + i % 3, 3.0 + 4.0 * i, i % 4 != 0));
  for (int i = 0; i < 6; ++i) va.push_back(graph_sample(c, rng, 1 + i % 2, 4.0 + 6.0 * i, 1));
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  cfg.seed = 21;
  const TrainResult a = train(c, tr, va, three_bins(), cfg), b = train(c, tr, va, three_bins(), cfg);
  ASSERT_EQ(a.history.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    EXPECT_EQ(a.history[i].val_cindex, b.history[i].val_cindex);
  }
  EXPECT_EQ(to_json(a.model).dump(), to_json(b.model).dump());
  cfg.seed = 22;
  EXPECT_NE(train(c, tr, va, three_bins(), cfg).history.back().train_loss, a.history.back().train_loss);
}

TEST(Training, OverfitsFourSamples) {
  Rng rng(17);
  const ModelConfig c = tiny();
  std::vector<Sample> tr;
  for (int i = 0; i < 4; ++i) tr.push_back(graph_sample(c, rng, 2, 5.0 + 9.0 * i, 1));
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 4;
  cfg.lr = 0.005;
  cfg.seed = 1;
  const TrainResult r = train(c, tr, {}, three_bins(), cfg);
  for (std::size_t e = 10; e < r.history.size(); ++e)
    EXPECT_LE(r.history[e].train_loss, r.history[e - 1].train_loss + 1e-12) << "epoch " << e + 1;
  EXPECT_LT(r.history.back().train_loss, 0.5 * r.history.front().train_loss);
}

TEST(Training, ZeroTumourPatients) {
  Rng rng(18);
  const ModelConfig c = tiny();
  std::vector<Sample> tr;
  for (int i = 0; i < 5; ++i) tr.push_back(graph_sample(c, rng, 1, 5.0 + 5.0 * i, 1));
  Sample empty = graph_sample(c, rng, 1, 7.0, 1);
  empty.graph = TumorGraph{};
  empty.graph.descriptors = Mat(0, c.n_descriptors);
  tr.push_back(empty);
  TrainConfig cfg;
  cfg.epochs = 1;
  const TrainResult r = train(c, tr, {}, three_bins(), cfg);
  EXPECT_EQ(r.excluded, 1u);
  const auto risks = predict_risks(r.model, tr);
  std::vector<double> known(risks.begin(), risks.begin() + 5);
  std::sort(known.begin(), known.end());
  EXPECT_DOUBLE_EQ(risks[5], known[2]);
}

TEST(Training, Errors) {
  const ModelConfig c = tiny();
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(train(c, {}, {}, three_bins(), cfg), ArgumentError);
  cfg.epochs = 1;
  EXPECT_THROW(train(c, {}, {}, three_bins(), cfg), ArgumentError);
}

TEST(Ensemble, Properties) {
  EXPECT_EQ(ensemble_risk({1, 3}, {3, 1}, EnsembleMode::RawMean), (std::vector<double>{2, 2}));
  Rng rng(19);
  std::vector<double> a(20), b(20);
  for (std::size_t i = 0; i < 20; ++i) {
    a[i] = rng.normal();
    b[i] = rng.normal();
  }
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    return idx;
  };
  for (auto mode : {EnsembleMode::ZScoreMean, EnsembleMode::RawMean})
    EXPECT_EQ(ranks(ensemble_risk(a, a, mode)), ranks(a));
  const auto base = ensemble_risk(a, b);
  for (int k = 0; k < 10; ++k) {
    const double s = rng.uniform(0.1, 10.0), o = rng.normal(0.0, 50.0);
    std::vector<double> a2(20);
    for (std::size_t i = 0; i < 20; ++i) a2[i] = s * a[i] + o;
    EXPECT_EQ(ranks(ensemble_risk(a2, b)), ranks(base));
  }
  std::vector<std::string> warn;
  const auto flat = ensemble_risk(std::vector<double>(20, 4.0), b, EnsembleMode::ZScoreMean, &warn);
  ASSERT_EQ(warn.size(), 1u);
  EXPECT_EQ(ranks(flat), ranks(b));
  EXPECT_THROW(ensemble_risk({1}, {1}), ArgumentError);
  EXPECT_THROW(ensemble_risk({1, 2}, {1, 2, 3}), ArgumentError);
}

TEST(Checkpoint, RoundTrip) {
  Rng rng(20);
  const ModelConfig c = tiny();
  std::vector<Sample> tr;
  for (int i = 0; i < 6; ++i) tr.push_back(graph_sample(c, rng, 1 + i % 2, 4.0 + 5.0 * i, 1));
  TrainConfig cfg;
  cfg.epochs = 2;
  const TrainResult r = train(c, tr, {}, three_bins(), cfg);
  const Model back = model_from_json(nlohmann::json::parse(to_json(r.model).dump()));
  for (const Sample& s : tr) EXPECT_EQ(predict(r.model, s).risk, predict(back, s).risk);
  nlohmann::json j = to_json(r.model);
  j["version"] = 7;
  EXPECT_THROW(model_from_json(j), FormatError);
  j = to_json(r.model);
  j["params"].erase("mlp1.bias");
  EXPECT_THROW(model_from_json(j), FormatError);
}
