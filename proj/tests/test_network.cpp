#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <random>
#include <set>

#include "gelatto/gradcheck_suite.hpp"
#include "gelatto/network.hpp"
#include "test_support.hpp"

using namespace gelatto;
using gelatto::testing::random_points;

namespace {

PointCloud random_labeled_cloud(std::size_t n, int classes, Rng& rng, double extent = 1.0) {
  PointCloud cloud;
  cloud.positions = random_points(n, rng, extent);
  std::uniform_real_distribution<double> col(0, 1);
  std::uniform_int_distribution<int> lab(0, classes - 1);
  for (std::size_t i = 0; i < n; ++i) {
    cloud.colors.push_back({col(rng), col(rng), col(rng)});
    cloud.labels.push_back(lab(rng));
  }
  return cloud;
}

ModelConfig tiny_config(std::size_t n_levels = 4) {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.stem_width = 8;
  cfg.bottleneck = 4;
  std::vector<LayerConfig> levels = {{32, 0.3, 4, 8}, {16, 0.6, 4, 8}, {8, 1.2, 4, 8}, {4, 2.4, 4, 8}};
  levels.resize(n_levels);
  cfg.levels = levels;
  return cfg;
}

LevelState make_level(const PointCloud& cloud, const SegModel& model, Tape& tape,
                      const ForwardOptions& opts) {
  LevelState base;
  base.points = cloud.positions;
  base.positions = positions_to_tensor(base.points);
  std::vector<double> feat(cloud.size() * 6, 0.0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int c = 0; c < 3; ++c) feat[i * 6 + c] = cloud.positions[i][c];
    if (cloud.has_colors())
      for (int c = 0; c < 3; ++c) feat[i * 6 + 3 + c] = cloud.colors[i][c];
  }
  base.features = model.stem.forward(tape, Tensor::from_values({cloud.size(), 6}, std::move(feat)),
                                     opts.training);
  return base;
}

// O(N^2) farthest point sampling, re-derived independently of the library.
std::vector<std::size_t> fps_oracle(const std::vector<Vec3>& pts, std::size_t m) {
  const std::size_t n = pts.size();
  Vec3 centroid = {0, 0, 0};
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return lex_less(pts[a], pts[b]); });
  for (std::size_t i : order)
    for (int c = 0; c < 3; ++c) centroid[c] += pts[i][c];
  for (int c = 0; c < 3; ++c) centroid[c] /= double(n);
  std::vector<std::size_t> picked;
  std::vector<bool> in(n, false);
  auto pick_best = [&](auto dist_of) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (in[i]) continue;
      if (best == n) { best = i; continue; }
      const double di = dist_of(i), db = dist_of(best);
      const bool better = di != db ? false : lex_less(pts[i], pts[best]);
      if (di > db || better) best = i;  // caller flips sign for minimization
    }
    return best;
  };
  // seed: minimize distance to centroid
  std::size_t seed = pick_best([&](std::size_t i) { return -sq_dist(pts[i], centroid); });
  picked.push_back(seed);
  in[seed] = true;
  while (picked.size() < m) {
    std::size_t best = pick_best([&](std::size_t i) {
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t p : picked) d = std::min(d, sq_dist(pts[i], pts[p]));
      return d;
    });
    picked.push_back(best);
    in[best] = true;
  }
  return picked;
}

}  // namespace

TEST(StridedBlock, DegenerateFullSample) {
  Rng rng(1);
  ModelConfig cfg = tiny_config(1);
  SegModel model = SegModel::make(cfg, 7);
  PointCloud cloud = random_labeled_cloud(16, 3, rng);
  Tape tape = Tape::inference();
  ForwardOptions opts;
  LevelState base = make_level(cloud, model, tape, opts);
  LayerConfig lc = cfg.levels[0];
  lc.sample_count = 16;   // no reduction
  lc.radius = 1e-9;       // only the point itself qualifies
  LevelState out = resnet_block_strided(tape, base, lc, model.levels[0].strided, opts, 1);
  EXPECT_EQ(out.points.size(), 16u);
  EXPECT_EQ(out.features.shape(), (Shape{16, 8}));
  // all K entries are the centroid itself
  for (std::size_t m = 0; m < 16; ++m)
    for (std::size_t k = 0; k < lc.k; ++k)
      EXPECT_EQ(out.nbr_strided.neighbors[m * lc.k + k], out.fps_index[m]);
}

TEST(StridedBlock, ZeroExitReducesToResidual) {
  Rng rng(2);
  ModelConfig cfg = tiny_config(1);
  SegModel model = SegModel::make(cfg, 8);
  BlockParams& bp = model.levels[0].strided;
  std::fill_n(bp.exit.weight.data(), bp.exit.weight.size(), 0.0);
  std::fill_n(bp.exit.bias.data(), bp.exit.bias.size(), 0.0);
  std::fill_n(bp.exit.beta.data(), bp.exit.beta.size(), 0.0);  // BN shift off too

  PointCloud cloud = random_labeled_cloud(40, 3, rng);
  Tape tape = Tape::inference();
  ForwardOptions opts;
  LevelState base = make_level(cloud, model, tape, opts);
  LevelState out = resnet_block_strided(tape, base, cfg.levels[0], bp, opts, 1);

  // replicate the residual path only
  Tensor gathered = gather_rows(tape, base.features,
                                std::span<const std::size_t>(out.nbr_strided.neighbors),
                                Shape{out.nbr_strided.rows(), out.nbr_strided.k});
  Tensor pooled = neighborhood_maxpool(tape, gathered);
  Tensor res = bp.residual->forward(tape, pooled, false);
  Tensor expected = relu(tape, res);
  ASSERT_EQ(out.features.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i)
    EXPECT_EQ(out.features.cdata()[i], expected.cdata()[i]);
}

TEST(StridedBlock, FpsOracleAndShapes) {
  Rng rng(3);
  ModelConfig cfg = tiny_config(1);
  SegModel model = SegModel::make(cfg, 9);
  PointCloud cloud = random_labeled_cloud(32, 3, rng);
  Tape tape = Tape::inference();
  ForwardOptions opts;
  LevelState base = make_level(cloud, model, tape, opts);
  LevelState out = resnet_block_strided(tape, base, cfg.levels[0], model.levels[0].strided, opts, 1);
  auto oracle = fps_oracle(cloud.positions, cfg.levels[0].sample_count);
  EXPECT_EQ(std::set<std::size_t>(out.fps_index.begin(), out.fps_index.end()),
            std::set<std::size_t>(oracle.begin(), oracle.end()));
  EXPECT_EQ(out.features.shape(), (Shape{cfg.levels[0].sample_count, cfg.levels[0].width}));
}

TEST(SameBlock, ZeroMainReducesToIdentityResidual) {
  Rng rng(4);
  ModelConfig cfg = tiny_config(1);
  SegModel model = SegModel::make(cfg, 10);
  BlockParams& bp = model.levels[0].same;
  std::fill_n(bp.exit.weight.data(), bp.exit.weight.size(), 0.0);
  std::fill_n(bp.exit.bias.data(), bp.exit.bias.size(), 0.0);
  std::fill_n(bp.exit.beta.data(), bp.exit.beta.size(), 0.0);

  PointCloud cloud = random_labeled_cloud(40, 3, rng);
  Tape tape = Tape::inference();
  ForwardOptions opts;
  LevelState base = make_level(cloud, model, tape, opts);
  LevelState lvl = resnet_block_strided(tape, base, cfg.levels[0], model.levels[0].strided, opts, 1);
  Tensor before = lvl.features;
  resnet_block_same(tape, lvl, cfg.levels[0], bp, opts, 1);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const double expected = before.cdata()[i] > 0 ? before.cdata()[i] : 0.0;
    EXPECT_EQ(lvl.features.cdata()[i], expected);
  }
}

TEST(SameBlock, UsesDoubledRadiusAndOracleSets) {
  Rng rng(5);
  ModelConfig cfg = tiny_config(1);
  SegModel model = SegModel::make(cfg, 11);
  PointCloud cloud = random_labeled_cloud(40, 3, rng);
  Tape tape = Tape::inference();
  ForwardOptions opts;
  LevelState base = make_level(cloud, model, tape, opts);
  LevelState lvl = resnet_block_strided(tape, base, cfg.levels[0], model.levels[0].strided, opts, 1);
  resnet_block_same(tape, lvl, cfg.levels[0], model.levels[0].same, opts, 1);
  EXPECT_DOUBLE_EQ(lvl.nbr_same.radius, 2.0 * cfg.levels[0].radius);
  for (std::size_t m = 0; m < lvl.points.size(); ++m) {
    auto oracle = brute_force_ball(lvl.points[m], lvl.points, 2.0 * cfg.levels[0].radius);
    const std::size_t k = cfg.levels[0].k;
    for (std::size_t j = 0; j < k; ++j)
      EXPECT_EQ(lvl.nbr_same.neighbors[m * k + j], oracle[j % oracle.size()]);
  }
}

TEST(SameBlock, SinglePointStaysFinite) {
  Rng rng(6);
  ModelConfig cfg = tiny_config(1);
  SegModel model = SegModel::make(cfg, 12);
  Tape tape = Tape::inference();
  ForwardOptions opts;
  LevelState lvl;
  lvl.points = {{0.1, 0.2, 0.3}};
  lvl.positions = positions_to_tensor(lvl.points);
  lvl.features = gelatto::testing::random_tensor({1, 8}, rng);
  resnet_block_same(tape, lvl, cfg.levels[0], model.levels[0].same, opts, 1);
  EXPECT_TRUE(lvl.features.all_finite());
  EXPECT_EQ(lvl.features.shape(), (Shape{1, 8}));
}

TEST(Encoder, PaperLevelSizes) {
  Rng rng(7);
  ModelConfig cfg = ModelConfig::defaults(13);
  SegModel model = SegModel::make(cfg, 13);
  PointCloud cloud = random_labeled_cloud(6144, 13, rng);
  Tape tape = Tape::inference();
  ForwardOptions opts;
  PyramidState pyr = encoder_forward(tape, cloud, model, opts);
  std::vector<std::size_t> sizes;
  for (const auto& lvl : pyr.levels) sizes.push_back(lvl.points.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{6144, 4096, 2048, 512, 128}));
}

TEST(Encoder, ClampsToSmallClouds) {
  Rng rng(8);
  ModelConfig cfg = ModelConfig::defaults(3);
  cfg.num_classes = 3;
  SegModel model = SegModel::make(cfg, 14);
  PointCloud cloud = random_labeled_cloud(100, 3, rng);
  Tape tape = Tape::inference();
  ForwardOptions opts;
  PyramidState pyr = encoder_forward(tape, cloud, model, opts);
  for (std::size_t l = 1; l < pyr.levels.size(); ++l)
    EXPECT_LE(pyr.levels[l].points.size(), pyr.levels[l - 1].points.size());
}

TEST(Encoder, RejectsTinyClouds) {
  ModelConfig cfg = tiny_config();
  SegModel model = SegModel::make(cfg, 15);
  PointCloud cloud;
  cloud.positions = {{0, 0, 0}, {1, 1, 1}};
  Tape tape = Tape::inference();
  ForwardOptions opts;
  EXPECT_THROW(encoder_forward(tape, cloud, model, opts), ContractError);
}

TEST(Network, PermutationEquivarianceOfLogits) {
  Rng rng(9);
  ModelConfig cfg = tiny_config();
  SegModel model = SegModel::make(cfg, 16);
  PointCloud cloud = random_labeled_cloud(64, 3, rng);

  ForwardOptions opts;  // deterministic, eval
  Tape tape = Tape::inference();
  PyramidState pyr = encoder_forward(tape, cloud, model, opts);
  DecoderOut dec = decoder_forward(tape, pyr, model, opts);

  std::vector<std::size_t> perm(cloud.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  PointCloud shuffled;
  for (std::size_t i : perm) {
    shuffled.positions.push_back(cloud.positions[i]);
    shuffled.colors.push_back(cloud.colors[i]);
    shuffled.labels.push_back(cloud.labels[i]);
  }
  Tape tape2 = Tape::inference();
  PyramidState pyr2 = encoder_forward(tape2, shuffled, model, opts);
  DecoderOut dec2 = decoder_forward(tape2, pyr2, model, opts);

  // per-level point sets coincide once mapped through the permutation
  for (std::size_t l = 1; l < pyr.levels.size(); ++l) {
    auto base_ids = pyr.original_indices(l);
    auto perm_ids = pyr2.original_indices(l);
    for (auto& i : perm_ids) i = perm[i];
    EXPECT_EQ(std::set<std::size_t>(base_ids.begin(), base_ids.end()),
              std::set<std::size_t>(perm_ids.begin(), perm_ids.end()))
        << "level " << l;
  }

  const std::size_t c = cfg.num_classes;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (std::size_t j = 0; j < c; ++j)
      EXPECT_NEAR(dec2.main_logits.cdata()[i * c + j], dec.main_logits.cdata()[perm[i] * c + j],
                  1e-9);
}

TEST(Decoder, ShapesAndEvalDeterminism) {
  Rng rng(10);
  ModelConfig cfg = tiny_config();
  SegModel model = SegModel::make(cfg, 17);
  PointCloud cloud = random_labeled_cloud(64, 3, rng);
  ForwardOptions opts;
  Tape tape = Tape::inference();
  PyramidState pyr = encoder_forward(tape, cloud, model, opts);
  DecoderOut dec = decoder_forward(tape, pyr, model, opts);
  EXPECT_EQ(dec.main_logits.shape(), (Shape{64, 3}));
  ASSERT_EQ(dec.aux_logits.size(), 4u);
  EXPECT_EQ(dec.aux_logits[0].shape(), (Shape{4, 3}));
  EXPECT_EQ(dec.aux_logits[1].shape(), (Shape{8, 3}));
  EXPECT_EQ(dec.aux_logits[2].shape(), (Shape{16, 3}));
  EXPECT_EQ(dec.aux_logits[3].shape(), (Shape{32, 3}));

  Tape tape2 = Tape::inference();
  PyramidState pyr2 = encoder_forward(tape2, cloud, model, opts);
  DecoderOut dec2 = decoder_forward(tape2, pyr2, model, opts);
  for (std::size_t i = 0; i < dec.main_logits.size(); ++i)
    EXPECT_EQ(dec.main_logits.cdata()[i], dec2.main_logits.cdata()[i]);  // bit-identical
}

TEST(Decoder, ConstantFeaturesGiveConstantLogits) {
  Rng rng(11);
  ModelConfig cfg = tiny_config();
  SegModel model = SegModel::make(cfg, 18);
  PointCloud cloud = random_labeled_cloud(48, 3, rng);
  ForwardOptions opts;
  Tape tape = Tape::inference();
  PyramidState pyr = encoder_forward(tape, cloud, model, opts);
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
    Tensor& f = pyr.levels[l].features;
    for (std::size_t r = 0; r < f.dim(0); ++r)
      for (std::size_t j = 0; j < f.dim(1); ++j)
        f.data()[r * f.dim(1) + j] = 0.1 * static_cast<double>(j + l);
  }
  DecoderOut dec = decoder_forward(tape, pyr, model, opts);
  const std::size_t c = cfg.num_classes;
  for (std::size_t i = 1; i < cloud.size(); ++i)
    for (std::size_t j = 0; j < c; ++j)
      EXPECT_NEAR(dec.main_logits.cdata()[i * c + j], dec.main_logits.cdata()[j], 1e-12);
}

TEST(Classification, DuplicationInvarianceWithSingletonNeighborhoods) {
  Rng rng(12);
  ModelConfig cfg = tiny_config(2);
  for (auto& lc : cfg.levels) lc.k = 1;  // self-neighborhoods: pointwise encoder
  SegModel model = SegModel::make(cfg, 19);
  PointCloud cloud = random_labeled_cloud(24, 3, rng);
  PointCloud doubled;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (int rep = 0; rep < 2; ++rep) {
      doubled.positions.push_back(cloud.positions[i]);
      doubled.colors.push_back(cloud.colors[i]);
      doubled.labels.push_back(cloud.labels[i]);
    }
  ForwardOptions opts;
  Tape t1 = Tape::inference();
  Tensor a = classification_forward(t1, cloud, model, opts);
  Tape t2 = Tape::inference();
  Tensor b = classification_forward(t2, doubled, model, opts);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.cdata()[i], b.cdata()[i], 1e-12);
}

TEST(Classification, PermutationInvariance) {
  Rng rng(13);
  ModelConfig cfg = tiny_config(2);
  SegModel model = SegModel::make(cfg, 20);
  PointCloud cloud = random_labeled_cloud(40, 3, rng);
  ForwardOptions opts;
  Tape t1 = Tape::inference();
  Tensor a = classification_forward(t1, cloud, model, opts);
  std::vector<std::size_t> perm(cloud.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  PointCloud shuffled;
  for (std::size_t i : perm) {
    shuffled.positions.push_back(cloud.positions[i]);
    shuffled.colors.push_back(cloud.colors[i]);
  }
  Tape t2 = Tape::inference();
  Tensor b = classification_forward(t2, shuffled, model, opts);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.cdata()[i], b.cdata()[i], 1e-9);
}

TEST(Classification, ConstantFeaturesEqualHeadOnConstant) {
  Rng rng(17);
  ModelConfig cfg = tiny_config(2);
  SegModel model = SegModel::make(cfg, 25);
  PointCloud cloud = random_labeled_cloud(32, 3, rng);
  ForwardOptions opts;
  Tape tape = Tape::inference();
  PyramidState pyr = encoder_forward(tape, cloud, model, opts);
  Tensor& top = pyr.levels.back().features;
  std::vector<double> constant(top.dim(1));
  for (std::size_t j = 0; j < constant.size(); ++j) constant[j] = 0.3 * double(j) - 0.5;
  for (std::size_t r = 0; r < top.dim(0); ++r)
    std::copy(constant.begin(), constant.end(), top.data() + r * constant.size());
  Tensor pooled = reduce(tape, top, 0, Reduce::Mean);
  Tensor expected = model.cls_out.forward(
      tape, model.cls_hidden.forward(tape, Tensor::from_values({constant.size()}, constant), false),
      false);
  Tensor hidden = model.cls_hidden.forward(tape, pooled, false);
  Tensor got = model.cls_out.forward(tape, hidden, false);
  for (std::size_t i = 0; i < got.size(); ++i)
    EXPECT_NEAR(got.cdata()[i], expected.cdata()[i], 1e-12);
}

TEST(Loss, ZeroAuxWeightsEqualMainBitwise) {
  Rng rng(14);
  ModelConfig cfg = tiny_config();
  SegModel model = SegModel::make(cfg, 21);
  PointCloud cloud = random_labeled_cloud(48, 3, rng);
  ForwardOptions opts;
  Tape tape;
  PyramidState pyr = encoder_forward(tape, cloud, model, opts);
  DecoderOut dec = decoder_forward(tape, pyr, model, opts);
  TrainConfig tc;
  tc.aux_weights = {0, 0, 0, 0};
  LossBreakdown lb = composite_loss(tape, dec.main_logits, dec.aux_logits, cloud.labels, pyr, tc);
  EXPECT_EQ(lb.total, lb.main);
  for (double a : lb.aux) EXPECT_GT(a, 0.0);  // still computed for the log
}

TEST(Loss, WeightedSumMatchesHandComputation) {
  Rng rng(15);
  ModelConfig cfg = tiny_config();
  SegModel model = SegModel::make(cfg, 22);
  PointCloud cloud = random_labeled_cloud(48, 3, rng);
  ForwardOptions opts;
  Tape tape;
  PyramidState pyr = encoder_forward(tape, cloud, model, opts);
  DecoderOut dec = decoder_forward(tape, pyr, model, opts);
  TrainConfig tc;  // default aux weights 0.4
  LossBreakdown lb = composite_loss(tape, dec.main_logits, dec.aux_logits, cloud.labels, pyr, tc);
  double manual = lb.main;
  for (double a : lb.aux) manual += 0.4 * a;
  EXPECT_NEAR(lb.total, manual, 1e-12);
}

TEST(Loss, PerfectLogitsApproachZeroWithoutSmoothing) {
  const std::size_t n = 10, c = 3;
  std::vector<double> logits(n * c, 0.0);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(i % c);
    logits[i * c + labels[i]] = 200.0;  // huge margin
  }
  Tape tape;
  Tensor loss = cross_entropy_smooth(tape, Tensor::from_values({n, c}, logits), labels, 0.0);
  EXPECT_NEAR(loss.value(), 0.0, 1e-12);
}

TEST(Loss, RejectsOutOfRangeLabel) {
  Tape tape;
  Tensor logits = Tensor::zeros({2, 3});
  EXPECT_THROW(cross_entropy_smooth(tape, logits, {0, 5}, 0.1), ContractError);
}

TEST(Loss, AuxTargetConsistency) {
  Rng rng(16);
  ModelConfig cfg = tiny_config();
  SegModel model = SegModel::make(cfg, 23);
  PointCloud cloud = random_labeled_cloud(64, 3, rng);
  ForwardOptions opts;
  Tape tape = Tape::inference();
  PyramidState pyr = encoder_forward(tape, cloud, model, opts);
  for (std::size_t level = 1; level < pyr.levels.size(); ++level) {
    auto chain = pyr.original_indices(level);
    EXPECT_EQ(chain.size(), pyr.levels[level].points.size());
    for (std::size_t i = 0; i < chain.size(); ++i) {
      // sampled points are original points: positions must match exactly
      for (int c = 0; c < 3; ++c)
        EXPECT_EQ(pyr.levels[level].points[i][c], cloud.positions[chain[i]][c]);
    }
  }
}

TEST(Config, RadiusDoublingEnforced) {
  ModelConfig cfg = tiny_config();
  cfg.levels[2].radius = 0.7;  // breaks 2x schedule
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(Config, DefaultsMatchPaperSchedule) {
  ModelConfig cfg = ModelConfig::defaults(13);
  cfg.validate();
  EXPECT_EQ(cfg.levels.size(), 4u);
  EXPECT_EQ(cfg.levels[0].sample_count, 4096u);
  EXPECT_EQ(cfg.levels[3].sample_count, 128u);
  EXPECT_DOUBLE_EQ(cfg.levels[0].radius, 0.10);
  EXPECT_DOUBLE_EQ(cfg.levels[3].radius, 0.80);
  EXPECT_EQ(cfg.levels[0].k, 32u);
  EXPECT_EQ(cfg.levels[3].k, 16u);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Tensor p = Tensor::from_values({3}, {1, 2, 3});
  p.set_requires_grad(true);
  AdamState st;
  TrainConfig tc;
  adam_step_params([&](const ParamVisitor& fn) { fn("p", p); }, st, tc);
  EXPECT_DOUBLE_EQ(p.cdata()[0], 1.0);  // no grad accumulated: untouched
}

TEST(Adam, ConstantGradientApproachesSignedStep) {
  Tensor p = Tensor::from_values({2}, {0, 0});
  p.set_requires_grad(true);
  AdamState st;
  TrainConfig tc;
  tc.lr = 1e-3;
  double prev0 = 0, prev1 = 0;
  for (int i = 0; i < 500; ++i) {
    p.drop_grad();
    double* g = p.grad_buffer();
    g[0] = 0.37;
    g[1] = -2.2;
    prev0 = p.cdata()[0];
    prev1 = p.cdata()[1];
    adam_step_params([&](const ParamVisitor& fn) { fn("p", p); }, st, tc);
  }
  EXPECT_NEAR(p.cdata()[0] - prev0, -tc.lr, tc.lr * 0.01);
  EXPECT_NEAR(p.cdata()[1] - prev1, tc.lr, tc.lr * 0.01);
}

TEST(Adam, QuadraticConvergence) {
  // loss = 0.5 * (x - 3)^2, gradient x - 3
  Tensor x = Tensor::from_values({1}, {8.0});
  x.set_requires_grad(true);
  AdamState st;
  TrainConfig tc;
  tc.lr = 1e-2;
  for (int step = 0; step < 2000; ++step) {
    x.drop_grad();
    x.grad_buffer()[0] = x.cdata()[0] - 3.0;
    adam_step_params([&](const ParamVisitor& fn) { fn("x", x); }, st, tc);
  }
  EXPECT_LT(std::abs(x.cdata()[0] - 3.0), 1e-3);
}

TEST(Adam, NanGradientAborts) {
  Tensor p = Tensor::from_values({1}, {1.0});
  p.set_requires_grad(true);
  p.grad_buffer()[0] = std::numeric_limits<double>::quiet_NaN();
  AdamState st;
  TrainConfig tc;
  EXPECT_THROW(adam_step_params([&](const ParamVisitor& fn) { fn("p", p); }, st, tc), NumericError);
}

TEST(MicroNetwork, EndToEndGradcheck) {
  const auto start = std::chrono::steady_clock::now();
  GradcheckReport report = run_micro_network_gradcheck(1e-4);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_TRUE(report.passed) << "worst: " << report.worst_name << " err " << report.worst_err;
  EXPECT_GT(report.entries.size(), 50u);
  EXPECT_LT(secs, 60.0);
}

TEST(MicroNetwork, FaultInjectionFailsTheSuite) {
  GradcheckReport report = run_micro_network_gradcheck(1e-4, /*inject_fault=*/true);
  EXPECT_FALSE(report.passed);
  EXPECT_GT(report.worst_err, 1e-2);
}
