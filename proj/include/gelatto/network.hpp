#pragma once

#include <array>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "gelatto/geometry.hpp"
#include "gelatto/layers.hpp"

namespace gelatto {

/// One encoder level: sampling target, grouping radius for the strided block
/// (the same-level block uses twice this), neighbor count and channel width.
struct LayerConfig {
  std::size_t sample_count = 0;
  double radius = 0.0;
  std::size_t k = 0;
  std::size_t width = 0;
};

struct ModelConfig {
  std::size_t num_classes = 0;
  std::size_t stem_width = 32;
  std::vector<LayerConfig> levels;
  std::size_t head_width = 0;  // 0 = first level width
  std::size_t bottleneck = 4;
  std::size_t group_size = 1;  // D', features per attention score
  HeadMode head_mode = HeadMode::Both;
  bool bn_relu_inside = false;  // BN+ReLU on the attention-layer f_* transforms
  double dropout = 0.5;

  static ModelConfig defaults(std::size_t num_classes) {
    ModelConfig cfg;
    cfg.num_classes = num_classes;
    cfg.levels = {{4096, 0.10, 32, 64}, {2048, 0.20, 32, 128}, {512, 0.40, 32, 256},
                  {128, 0.80, 16, 512}};
    return cfg;
  }

  std::size_t resolved_head_width() const { return head_width ? head_width : levels.front().width; }

  void validate() const {
    if (num_classes < 2) throw ValidationError("model: need at least 2 classes");
    if (levels.empty()) throw ValidationError("model: no encoder levels configured");
    for (std::size_t l = 0; l < levels.size(); ++l) {
      const LayerConfig& lc = levels[l];
      if (lc.sample_count == 0 || lc.k == 0 || lc.width == 0 || lc.radius <= 0)
        throw ValidationError("model: level " + std::to_string(l) + " has empty fields");
      if (lc.width % bottleneck != 0)
        throw ValidationError("model: level width not divisible by bottleneck ratio");
      if ((lc.width / bottleneck) % group_size != 0)
        throw ValidationError("model: attention width not divisible by group size D'");
      if (l > 0) {
        if (levels[l].sample_count >= levels[l - 1].sample_count)
          throw ValidationError("model: sample counts must be strictly decreasing");
        if (levels[l].radius != 2.0 * levels[l - 1].radius)
          throw ValidationError("model: radius must double exactly at every level");
      }
    }
  }
};

/// Bottleneck block transforms: entry MLP (BN+ReLU) into the attention width,
/// the two-headed layer, exit MLP (BN), and the residual channel matcher (BN).
struct BlockParams {
  SharedMLP entry;
  GeLattoParams attn;
  SharedMLP exit;
  std::optional<SharedMLP> residual;

  static BlockParams make(std::size_t in_width, std::size_t out_width, std::size_t inner,
                          const ModelConfig& cfg, bool with_residual_mlp, Rng& rng) {
    BlockParams b;
    b.entry = SharedMLP::make(in_width, inner, true, true, rng);
    b.attn = GeLattoParams::make(inner, cfg.group_size, cfg.head_mode, cfg.bn_relu_inside, rng);
    b.exit = SharedMLP::make(inner, out_width, true, false, rng);
    if (with_residual_mlp) b.residual = SharedMLP::make(in_width, out_width, true, false, rng);
    return b;
  }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) {
    entry.visit_params(prefix + ".entry", fn);
    attn.visit_params(prefix + ".attn", fn);
    exit.visit_params(prefix + ".exit", fn);
    if (residual) residual->visit_params(prefix + ".residual", fn);
  }
  void visit_state(const std::string& prefix, const ParamVisitor& fn) {
    entry.visit_state(prefix + ".entry", fn);
    attn.visit_state(prefix + ".attn", fn);
    exit.visit_state(prefix + ".exit", fn);
    if (residual) residual->visit_state(prefix + ".residual", fn);
  }
};

struct LevelParams {
  BlockParams strided;
  BlockParams same;
};

/// The full encoder-decoder network plus the classification variant's head.
struct SegModel {
  ModelConfig cfg;
  SharedMLP stem;  // xyz+rgb -> stem width
  std::vector<LevelParams> levels;
  std::vector<SharedMLP> fuse;       // decoder up-step fusers, coarse to fine
  SharedMLP out_mlp;                 // final fuse to head width (BN+ReLU)
  std::vector<SharedMLP> aux_heads;  // one per level, coarsest first
  SharedMLP main_head;
  SharedMLP cls_hidden, cls_out;     // classification variant

  static SegModel make(ModelConfig cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0x6d6f64));
    SegModel m;
    m.cfg = cfg;
    m.stem = SharedMLP::make(6, cfg.stem_width, true, true, rng);
    std::size_t prev = cfg.stem_width;
    for (const LayerConfig& lc : cfg.levels) {
      const std::size_t inner = lc.width / cfg.bottleneck;
      LevelParams lp;
      lp.strided = BlockParams::make(prev, lc.width, inner, cfg, true, rng);
      lp.same = BlockParams::make(lc.width, lc.width, inner, cfg, false, rng);
      m.levels.push_back(std::move(lp));
      prev = lc.width;
    }
    const std::size_t n_levels = cfg.levels.size();
    for (std::size_t j = 0; j + 1 < n_levels; ++j) {
      const std::size_t coarse = cfg.levels[n_levels - 1 - j].width;
      const std::size_t fine = cfg.levels[n_levels - 2 - j].width;
      m.fuse.push_back(SharedMLP::make(coarse + fine, fine, true, true, rng));
    }
    m.out_mlp = SharedMLP::make(cfg.levels.front().width + cfg.stem_width,
                                cfg.resolved_head_width(), true, true, rng);
    m.aux_heads.push_back(SharedMLP::make(cfg.levels.back().width, cfg.num_classes, false, false, rng));
    for (std::size_t j = 0; j + 1 < n_levels; ++j)
      m.aux_heads.push_back(
          SharedMLP::make(cfg.levels[n_levels - 2 - j].width, cfg.num_classes, false, false, rng));
    m.main_head = SharedMLP::make(cfg.resolved_head_width(), cfg.num_classes, false, false, rng);
    m.cls_hidden = SharedMLP::make(cfg.levels.back().width, cfg.levels.back().width, false, true, rng);
    m.cls_out = SharedMLP::make(cfg.levels.back().width, cfg.num_classes, false, false, rng);
    return m;
  }

  void visit_params(const ParamVisitor& fn) {
    stem.visit_params("stem", fn);
    for (std::size_t l = 0; l < levels.size(); ++l) {
      levels[l].strided.visit_params("level" + std::to_string(l + 1) + ".strided", fn);
      levels[l].same.visit_params("level" + std::to_string(l + 1) + ".same", fn);
    }
    for (std::size_t j = 0; j < fuse.size(); ++j)
      fuse[j].visit_params("decoder.fuse" + std::to_string(j), fn);
    out_mlp.visit_params("decoder.out_mlp", fn);
    for (std::size_t j = 0; j < aux_heads.size(); ++j)
      aux_heads[j].visit_params("decoder.aux_head" + std::to_string(j), fn);
    main_head.visit_params("decoder.main_head", fn);
    cls_hidden.visit_params("cls.hidden", fn);
    cls_out.visit_params("cls.out", fn);
  }

  void visit_state(const ParamVisitor& fn) {
    stem.visit_state("stem", fn);
    for (std::size_t l = 0; l < levels.size(); ++l) {
      levels[l].strided.visit_state("level" + std::to_string(l + 1) + ".strided", fn);
      levels[l].same.visit_state("level" + std::to_string(l + 1) + ".same", fn);
    }
    for (std::size_t j = 0; j < fuse.size(); ++j)
      fuse[j].visit_state("decoder.fuse" + std::to_string(j), fn);
    out_mlp.visit_state("decoder.out_mlp", fn);
  }
};

struct ForwardOptions {
  bool training = false;
  bool deterministic = true;  // neighbor sampling mode for grouping
  std::uint64_t seed = 0;     // seeds neighbor sampling and dropout

  NeighborMode neighbor_mode(std::uint64_t salt) const {
    return deterministic ? NeighborMode::det() : NeighborMode::seeded(mix_seed(seed, salt));
  }
};

/// Per-level snapshot connecting encoder, decoder and auxiliary targets.
struct LevelState {
  std::vector<Vec3> points;
  Tensor positions;  // [N_l,3]
  Tensor features;   // [N_l,D_l]
  std::vector<std::size_t> fps_index;  // into the parent level (empty at level 0)
  NeighborIndex nbr_strided, nbr_same;
  AttentionTrace trace_strided, trace_same;
};

struct PyramidState {
  std::vector<LevelState> levels;  // [0] = stem level (network input points)

  /// Indices of level `l`'s points in the original input, via composed FPS chains.
  std::vector<std::size_t> original_indices(std::size_t level) const {
    std::vector<std::size_t> idx(levels[0].points.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t l = 1; l <= level; ++l) {
      std::vector<std::size_t> next(levels[l].fps_index.size());
      for (std::size_t i = 0; i < next.size(); ++i) next[i] = idx[levels[l].fps_index[i]];
      idx = std::move(next);
    }
    return idx;
  }
};

namespace netdetail {

inline Tensor block_residual(Tape& tape, const Tensor& parent_features, const NeighborIndex& nbr,
                             const std::optional<SharedMLP>& residual_mlp, bool training) {
  Tensor gathered = gather_rows(tape, parent_features, std::span<const std::size_t>(nbr.neighbors),
                                Shape{nbr.rows(), nbr.k});
  Tensor pooled = neighborhood_maxpool(tape, gathered);
  return residual_mlp->forward(tape, pooled, training);
}

}  // namespace netdetail

/// Strided bottleneck block: FPS-sampled centroids grouped against the parent
/// level; residual path maxpools raw parent features over the same
/// neighborhoods and channel-matches them.
inline LevelState resnet_block_strided(Tape& tape, const LevelState& parent,
                                       const LayerConfig& cfg, const BlockParams& params,
                                       const ForwardOptions& opts, std::uint64_t level_salt) {
  if (cfg.sample_count > parent.points.size())
    throw ContractError("resnet_block_strided: sample count " + std::to_string(cfg.sample_count) +
                        " exceeds parent size " + std::to_string(parent.points.size()));
  LevelState out;
  out.fps_index = farthest_point_sample(parent.points, cfg.sample_count);
  out.points.reserve(cfg.sample_count);
  for (std::size_t i : out.fps_index) out.points.push_back(parent.points[i]);
  out.positions = positions_to_tensor(out.points);
  out.nbr_strided = radius_neighbors(out.points, parent.points, cfg.radius, cfg.k,
                                     opts.neighbor_mode(level_salt * 2), &out.fps_index);

  Tensor entry = params.entry.forward(tape, parent.features, opts.training);
  Tensor centroid_feat = gather_rows(tape, entry, out.fps_index);
  auto attn = gelatto_forward(tape, out.positions, out.nbr_strided, parent.positions,
                              centroid_feat, entry, params.attn, opts.training);
  out.trace_strided = std::move(attn.trace);
  Tensor main = params.exit.forward(tape, attn.out, opts.training);
  Tensor res = netdetail::block_residual(tape, parent.features, out.nbr_strided, params.residual,
                                         opts.training);
  out.features = relu(tape, add(tape, main, res));
  return out;
}

/// Same-level block: every point is a centroid, neighborhoods are drawn from
/// this level with twice the strided radius, and the residual is the identity.
inline void resnet_block_same(Tape& tape, LevelState& level, const LayerConfig& cfg,
                              const BlockParams& params, const ForwardOptions& opts,
                              std::uint64_t level_salt) {
  level.nbr_same = radius_neighbors(level.points, level.points, 2.0 * cfg.radius, cfg.k,
                                    opts.neighbor_mode(level_salt * 2 + 1));
  Tensor entry = params.entry.forward(tape, level.features, opts.training);
  auto attn = gelatto_forward(tape, level.positions, level.nbr_same, level.positions, entry,
                              entry, params.attn, opts.training);
  level.trace_same = std::move(attn.trace);
  Tensor main = params.exit.forward(tape, attn.out, opts.training);
  Tensor res = level.features;
  if (params.residual) res = params.residual->forward(tape, res, opts.training);
  level.features = relu(tape, add(tape, main, res));
}

/// Stem + pyramid of (strided, same) block pairs. Level sample counts clamp
/// to the running point count so undersized clouds still run end to end.
inline PyramidState encoder_forward(Tape& tape, const PointCloud& cloud, const SegModel& model,
                                    const ForwardOptions& opts) {
  const std::size_t n = cloud.size();
  if (n < 8) throw ContractError("encoder_forward: need at least 8 points, got " + std::to_string(n));
  PyramidState pyramid;
  LevelState base;
  base.points = cloud.positions;
  base.positions = positions_to_tensor(base.points);
  std::vector<double> feat(n * 6, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    feat[i * 6 + 0] = cloud.positions[i][0];
    feat[i * 6 + 1] = cloud.positions[i][1];
    feat[i * 6 + 2] = cloud.positions[i][2];
    if (cloud.has_colors()) {
      feat[i * 6 + 3] = cloud.colors[i][0];
      feat[i * 6 + 4] = cloud.colors[i][1];
      feat[i * 6 + 5] = cloud.colors[i][2];
    }
  }
  base.features = model.stem.forward(tape, Tensor::from_values({n, 6}, std::move(feat)),
                                     opts.training);
  pyramid.levels.push_back(std::move(base));

  for (std::size_t l = 0; l < model.cfg.levels.size(); ++l) {
    LayerConfig cfg = model.cfg.levels[l];
    cfg.sample_count = std::min(cfg.sample_count, pyramid.levels.back().points.size());
    LevelState next = resnet_block_strided(tape, pyramid.levels.back(), cfg,
                                           model.levels[l].strided, opts, l + 1);
    resnet_block_same(tape, next, cfg, model.levels[l].same, opts, l + 1);
    pyramid.levels.push_back(std::move(next));
  }
  return pyramid;
}

struct DecoderOut {
  Tensor main_logits;              // [N,C]
  std::vector<Tensor> aux_logits;  // coarsest first: [N_L,C] ... [N_1,C]
};

/// Interpolating decoder with deep supervision: a classifier on the coarsest
/// level, then one up-step per level with fusion against the encoder skip,
/// an auxiliary head after each, and the dropout-regularized main head.
inline DecoderOut decoder_forward(Tape& tape, const PyramidState& pyramid, const SegModel& model,
                                  const ForwardOptions& opts) {
  if (model.cfg.num_classes < 2) throw ContractError("decoder_forward: need at least 2 classes");
  DecoderOut out;
  const std::size_t n_levels = model.levels.size();
  const LevelState& top = pyramid.levels[n_levels];
  out.aux_logits.push_back(model.aux_heads[0].forward(tape, top.features, opts.training));

  Tensor x = top.features;
  for (std::size_t j = 0; j + 1 < n_levels; ++j) {
    const LevelState& coarse = pyramid.levels[n_levels - j];
    const LevelState& fine = pyramid.levels[n_levels - 1 - j];
    Tensor up = interpolate_features(tape, fine.points, coarse.points, x);
    x = model.fuse[j].forward(tape, concat_last(tape, up, fine.features), opts.training);
    out.aux_logits.push_back(model.aux_heads[j + 1].forward(tape, x, opts.training));
  }

  const LevelState& base = pyramid.levels[0];
  Tensor up = interpolate_features(tape, base.points, pyramid.levels[1].points, x);
  Tensor fused = model.out_mlp.forward(tape, concat_last(tape, up, base.features), opts.training);
  if (opts.training && model.cfg.dropout > 0.0) {
    Rng drop_rng(mix_seed(opts.seed, 0xd70b));
    fused = dropout(tape, fused, model.cfg.dropout, drop_rng);
  }
  out.main_logits = model.main_head.forward(tape, fused, opts.training);
  return out;
}

/// Classification variant: global average pooling over the coarsest encoder
/// features, then a two-layer head.
inline Tensor classification_forward(Tape& tape, const PointCloud& cloud, const SegModel& model,
                                     const ForwardOptions& opts) {
  PyramidState pyramid = encoder_forward(tape, cloud, model, opts);
  Tensor pooled = reduce(tape, pyramid.levels.back().features, 0, Reduce::Mean);  // [D]
  Tensor hidden = model.cls_hidden.forward(tape, pooled, opts.training);
  return model.cls_out.forward(tape, hidden, opts.training);
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  std::size_t batch_size = 2;
  double label_smoothing = 0.1;
  std::vector<double> aux_weights = {0.4, 0.4, 0.4, 0.4};
  std::size_t epochs = 50;
  std::uint64_t seed = 0;

  void validate() const {
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw ValidationError("train: label smoothing must be in [0,1)");
    for (double a : aux_weights)
      if (a < 0.0) throw ValidationError("train: aux weights must be nonnegative");
    if (batch_size == 0 || epochs == 0) throw ValidationError("train: batch size and epochs must be positive");
  }
};

/// Label-smoothed cross entropy, mean over points. The target distribution
/// puts 1-eps on the true class and eps/(C-1) elsewhere.
inline Tensor cross_entropy_smooth(Tape& tape, const Tensor& logits,
                                   const std::vector<int>& labels, double smoothing) {
  detail::require(logits.rank() == 2, "cross_entropy_smooth: logits must be [N,C]");
  const std::size_t n = logits.dim(0);
  const std::size_t c = logits.dim(1);
  if (labels.size() != n) throw ContractError("cross_entropy_smooth: label count mismatch");
  std::vector<double> target(n * c, c > 1 ? smoothing / static_cast<double>(c - 1) : 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw ContractError("cross_entropy_smooth: label " + std::to_string(labels[i]) +
                          " out of range [0," + std::to_string(c) + ")");
    target[i * c + labels[i]] = 1.0 - smoothing;
  }
  Tensor t = Tensor::from_values({n, c}, std::move(target));
  Tensor ls = log_softmax_axis(tape, logits, 1);
  Tensor per_point = reduce(tape, mul(tape, ls, t), 1, Reduce::Sum);  // [N]
  return scale(tape, reduce(tape, per_point, 0, Reduce::Mean), -1.0);
}

struct LossBreakdown {
  double main = 0.0;
  std::vector<double> aux;  // unweighted values, coarsest first
  double total = 0.0;
  Tensor total_tensor;
};

/// Total = main + sum_i alpha_i * aux_i. Aux targets are the ground-truth
/// labels of the retained sampled points via composed FPS index chains.
/// Zero-weighted aux terms are evaluated for the log but kept off the
/// gradient graph, so an all-zero run is bit-identical to main-only training.
inline LossBreakdown composite_loss(Tape& tape, const Tensor& main_logits,
                                    const std::vector<Tensor>& aux_logits,
                                    const std::vector<int>& labels, const PyramidState& pyramid,
                                    const TrainConfig& cfg) {
  const std::size_t n_aux = aux_logits.size();
  if (cfg.aux_weights.size() != n_aux)
    throw ContractError("composite_loss: " + std::to_string(n_aux) + " aux outputs but " +
                        std::to_string(cfg.aux_weights.size()) + " weights");
  LossBreakdown out;
  Tensor total = cross_entropy_smooth(tape, main_logits, labels, cfg.label_smoothing);
  out.main = total.value();
  const std::size_t n_levels = pyramid.levels.size() - 1;
  for (std::size_t j = 0; j < n_aux; ++j) {
    const std::size_t level = n_levels - j;  // aux 0 is the coarsest level
    std::vector<std::size_t> chain = pyramid.original_indices(level);
    std::vector<int> aux_labels(chain.size());
    for (std::size_t i = 0; i < chain.size(); ++i) aux_labels[i] = labels[chain[i]];
    Tensor aux = cross_entropy_smooth(tape, aux_logits[j], aux_labels, cfg.label_smoothing);
    out.aux.push_back(aux.value());
    if (cfg.aux_weights[j] > 0.0)
      total = add(tape, total, scale(tape, aux, cfg.aux_weights[j]));
  }
  out.total = total.value();
  out.total_tensor = total;
  return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  struct Slot {
    std::vector<double> m, v;
  };
  std::unordered_map<std::string, Slot> slots;
  std::uint64_t t = 0;
};

/// Bias-corrected Adam over every parameter a visitor yields. Parameters with
/// no accumulated gradient are left untouched. NaN gradients abort.
inline void adam_step_params(const std::function<void(const ParamVisitor&)>& visit_all,
                             AdamState& state, const TrainConfig& cfg) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  visit_all([&](const std::string& name, Tensor& p) {
    if (!p.has_grad()) return;
    auto& slot = state.slots[name];
    if (slot.m.empty()) {
      slot.m.assign(p.size(), 0.0);
      slot.v.assign(p.size(), 0.0);
    }
    const double* g = p.cgrad();
    double* data = p.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NumericError("adam_step: non-finite gradient in " + name);
      slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g[i];
      slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  });
}

inline void adam_step(SegModel& model, AdamState& state, const TrainConfig& cfg) {
  adam_step_params([&](const ParamVisitor& fn) { model.visit_params(fn); }, state, cfg);
}

inline void zero_gradients(SegModel& model) {
  model.visit_params([](const std::string&, Tensor& p) { p.drop_grad(); });
}

}  // namespace gelatto
