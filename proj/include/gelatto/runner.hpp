#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gelatto/checkpoint.hpp"
#include "gelatto/config.hpp"
#include "gelatto/data.hpp"
#include "gelatto/metrics.hpp"
#include "gelatto/network.hpp"

namespace gelatto {

// ---------------------------------------------------------------------------
// Datasets and block preparation
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<PointCloud> scenes;
  std::vector<std::string> names;

  std::size_t size() const { return scenes.size(); }
};

inline Dataset load_dataset_dir(const std::string& dir, int num_classes = -1) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ValidationError("dataset directory '" + dir + "' not found");
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string ext = entry.path().extension().string();
    if (ext == ".pts" || ext == ".ptb") paths.push_back(entry.path().string());
  }
  std::sort(paths.begin(), paths.end());
  Dataset ds;
  for (const auto& p : paths) {
    ds.scenes.push_back(read_cloud(p));
    ds.scenes.back().validate(num_classes);
    ds.names.push_back(p);
  }
  if (ds.scenes.empty()) throw ValidationError("no .pts/.ptb files in '" + dir + "'");
  return ds;
}

/// One training/evaluation unit: an xy block of a scene in normalized local
/// coordinates, with its index map back into the scene.
struct BlockView {
  std::vector<std::size_t> indices;  // into the scene
  PointCloud local;                  // normalized positions + colors/labels subset
  BlockFrame frame;
};

/// Partitions a scene into 2D blocks and merges blocks smaller than
/// `min_points` into the nearest adequately sized block (the encoder needs a
/// minimum population).
inline std::vector<BlockView> build_blocks(const PointCloud& scene, double block_xy,
                                           std::size_t min_points) {
  auto groups = partition_blocks(scene, block_xy);
  auto center_of = [&](const std::vector<std::size_t>& g) {
    Vec3 c = {0, 0, 0};
    for (std::size_t i : g)
      for (int a = 0; a < 2; ++a) c[a] += scene.positions[i][a];
    c[0] /= static_cast<double>(g.size());
    c[1] /= static_cast<double>(g.size());
    return c;
  };
  std::vector<std::size_t> big, small;
  for (std::size_t i = 0; i < groups.size(); ++i)
    (groups[i].size() >= min_points ? big : small).push_back(i);
  if (big.empty()) {
    // collapse everything into one block
    std::vector<std::size_t> all;
    for (auto& g : groups) all.insert(all.end(), g.begin(), g.end());
    groups = {std::move(all)};
  } else if (!small.empty()) {
    std::vector<Vec3> big_centers;
    for (std::size_t b : big) big_centers.push_back(center_of(groups[b]));
    for (std::size_t s : small) {
      const Vec3 c = center_of(groups[s]);
      std::size_t nearest = 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t b = 0; b < big.size(); ++b) {
        const double dx = big_centers[b][0] - c[0];
        const double dy = big_centers[b][1] - c[1];
        if (dx * dx + dy * dy < best) {
          best = dx * dx + dy * dy;
          nearest = b;
        }
      }
      auto& dst = groups[big[nearest]];
      dst.insert(dst.end(), groups[s].begin(), groups[s].end());
      groups[s].clear();
    }
    groups.erase(std::remove_if(groups.begin(), groups.end(),
                                [](const auto& g) { return g.empty(); }),
                 groups.end());
  }

  std::vector<BlockView> blocks;
  for (auto& g : groups) {
    std::sort(g.begin(), g.end());  // canonical order within a block
    BlockView bv;
    bv.indices = g;
    std::vector<Vec3> pts;
    pts.reserve(g.size());
    for (std::size_t i : g) pts.push_back(scene.positions[i]);
    bv.local.positions = normalize_block(pts, bv.frame);
    if (scene.has_colors())
      for (std::size_t i : g) bv.local.colors.push_back(scene.colors[i]);
    if (scene.has_labels())
      for (std::size_t i : g) bv.local.labels.push_back(scene.labels[i]);
    blocks.push_back(std::move(bv));
  }
  return blocks;
}

inline PointCloud subset_cloud(const PointCloud& cloud, const std::vector<std::size_t>& idx) {
  PointCloud out;
  out.positions.reserve(idx.size());
  for (std::size_t i : idx) out.positions.push_back(cloud.positions[i]);
  if (cloud.has_colors())
    for (std::size_t i : idx) out.colors.push_back(cloud.colors[i]);
  if (cloud.has_labels())
    for (std::size_t i : idx) out.labels.push_back(cloud.labels[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation
// ---------------------------------------------------------------------------

/// Writes `train/scene_###.pts` and `test/scene_###.pts` under out_dir.
inline void synth_dataset(const RunConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "train");
  fs::create_directories(fs::path(out_dir) / "test");
  auto emit = [&](const std::string& split, std::size_t count, std::uint64_t salt) {
    for (std::size_t i = 0; i < count; ++i) {
      SceneSpec spec = cfg.scene;
      spec.seed = mix_seed(cfg.seed, salt + i);
      PointCloud cloud = generate_scene(spec);
      char name[64];
      std::snprintf(name, sizeof name, "scene_%03zu.pts", i);
      write_cloud(cloud, (fs::path(out_dir) / split / name).string());
    }
  };
  emit("train", cfg.synth_train_count, 0x7777000);
  emit("test", cfg.synth_test_count, 0x8888000);
}

// ---------------------------------------------------------------------------
// Evaluation protocol: coverage sampling + softmax voting
// ---------------------------------------------------------------------------

/// Labels every point of a scene: per block, windows from coverage_sampler,
/// one eval forward per window, softmax votes summed per original point.
inline std::vector<int> predict_scene(const SegModel& model, const PointCloud& scene,
                                      const RunConfig& cfg) {
  const auto blocks = build_blocks(scene, cfg.block_size, cfg.min_block_points);
  VoteAccumulator acc(scene.size(), model.cfg.num_classes);
  ForwardOptions opts;
  opts.training = false;
  opts.deterministic = true;  // eval grouping is always the deterministic k-nearest
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const BlockView& blk = blocks[b];
    const std::size_t window_size = std::min<std::size_t>(cfg.input_points, blk.local.size());
    const auto windows = coverage_sampler(blk.local.size(), window_size, mix_seed(cfg.seed, b));
    for (const auto& window : windows) {
      PointCloud input = subset_cloud(blk.local, window);
      Tape tape = Tape::inference();
      PyramidState pyr = encoder_forward(tape, input, model, opts);
      DecoderOut dec = decoder_forward(tape, pyr, model, opts);
      Tensor probs = softmax_axis(tape, dec.main_logits, 1);
      std::vector<std::size_t> scene_idx(window.size());
      for (std::size_t i = 0; i < window.size(); ++i) scene_idx[i] = blk.indices[window[i]];
      acc.update(scene_idx, probs);
    }
  }
  return acc.finalize();
}

struct EvalResult {
  ConfusionMatrix cm{2};
  ConfusionMatrix::Metrics metrics;
};

inline EvalResult evaluate_dataset(const SegModel& model, const Dataset& ds, const RunConfig& cfg) {
  const int threads = cfg.threads ? static_cast<int>(cfg.threads) : thread_budget();
  std::vector<ConfusionMatrix> per_scene(ds.size(), ConfusionMatrix(model.cfg.num_classes));
  parallel_for(ds.size(), threads, [&](std::size_t s) {
    const PointCloud& scene = ds.scenes[s];
    if (!scene.has_labels()) throw ValidationError("evaluate: scene has no labels: " + ds.names[s]);
    const auto pred = predict_scene(model, scene, cfg);
    per_scene[s].update(scene.labels, pred);
  });
  EvalResult out;
  out.cm = ConfusionMatrix(model.cfg.num_classes);
  for (const auto& cm : per_scene) out.cm.merge(cm);  // merged in scene order
  out.metrics = out.cm.compute();
  return out;
}

inline std::string format_metrics_table(const ConfusionMatrix::Metrics& m,
                                        const std::vector<std::string>& class_names = {}) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "OA    " << m.oa << "\nmAcc  " << m.macc << "\nmIoU  " << m.miou << "\n";
  for (std::size_t c = 0; c < m.class_iou.size(); ++c) {
    const std::string name =
        c < class_names.size() ? class_names[c] : "class" + std::to_string(c);
    os << "  IoU[" << name << "] ";
    if (m.class_iou[c] < 0) os << "absent";
    else os << m.class_iou[c];
    os << "\n";
  }
  return os.str();
}

inline void write_metrics_kv(const ConfusionMatrix::Metrics& m, const std::string& path) {
  std::ofstream out(path);
  out.setf(std::ios::fixed);
  out.precision(6);
  out << "oa = " << m.oa << "\nmacc = " << m.macc << "\nmiou = " << m.miou << "\n";
  for (std::size_t c = 0; c < m.class_iou.size(); ++c)
    out << "iou_" << c << " = " << m.class_iou[c] << "\n";
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;
  double main_loss = 0.0;
  std::vector<double> aux_loss;
  double train_oa = 0.0;
  double train_miou = 0.0;
  double val_miou = -1.0;  // -1 when not evaluated this epoch
  double seconds = 0.0;
};

struct TrainResult {
  SegModel model;
  AdamState adam;
  std::vector<EpochLog> log;
  double best_val_miou = -1.0;
  std::string best_path, last_path;
};

inline std::string format_epoch_line(const EpochLog& e) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  os << "epoch " << e.epoch << " main " << e.main_loss << " aux ";
  for (std::size_t i = 0; i < e.aux_loss.size(); ++i) os << (i ? "," : "") << e.aux_loss[i];
  os << " train_oa " << e.train_oa << " train_miou " << e.train_miou;
  if (e.val_miou >= 0) os << " val_miou " << e.val_miou;
  os.precision(2);
  os << " sec " << e.seconds;
  return os.str();
}

/// Single-threaded optimizer loop: per epoch a seeded shuffle of
/// (scene, block) items, one sampled window per item, sequential
/// forward/backward with gradients accumulated over the batch, one Adam step
/// per batch. Fully reproducible under a fixed seed.
inline TrainResult train_run(const RunConfig& cfg, const Dataset& train_ds, const Dataset& val_ds,
                             std::ostream* echo = nullptr) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  TrainResult result{SegModel::make(cfg.model, cfg.seed), {}, {}, -1.0, "", ""};
  SegModel& model = result.model;
  AdamState& adam = result.adam;
  result.best_path = (fs::path(cfg.out_dir) / "model_best.ckpt").string();
  result.last_path = (fs::path(cfg.out_dir) / "model_last.ckpt").string();

  struct Item {
    std::size_t scene, block;
  };
  std::vector<std::vector<BlockView>> blocks(train_ds.size());
  std::vector<Item> items;
  for (std::size_t s = 0; s < train_ds.size(); ++s) {
    blocks[s] = build_blocks(train_ds.scenes[s], cfg.block_size, cfg.min_block_points);
    for (std::size_t b = 0; b < blocks[s].size(); ++b) items.push_back({s, b});
  }

  std::ofstream log_file((fs::path(cfg.out_dir) / "train.log").string(), std::ios::app);
  auto emit = [&](const std::string& line) {
    log_file << line << "\n";
    log_file.flush();
    if (echo) (*echo) << line << "\n";
  };

  for (std::size_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), Rng(mix_seed(cfg.seed, 0xe90c + epoch)));

    double main_sum = 0.0;
    std::vector<double> aux_sum(cfg.train.aux_weights.size(), 0.0);
    std::size_t n_items = 0;
    ConfusionMatrix train_cm(cfg.model.num_classes);

    for (std::size_t start = 0; start < order.size(); start += cfg.train.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.train.batch_size);
      for (std::size_t oi = start; oi < end; ++oi) {
        const Item item = items[order[oi]];
        const BlockView& blk = blocks[item.scene][item.block];
        const std::uint64_t item_seed = mix_seed(cfg.seed, (epoch << 20) ^ (order[oi] << 2));
        const std::size_t window_size = std::min<std::size_t>(cfg.input_points, blk.local.size());
        const auto window = sample_fixed(blk.local.size(), window_size, item_seed);
        PointCloud input = subset_cloud(blk.local, window);
        if (cfg.augment_enabled) input = augment(input, mix_seed(item_seed, 0xa09), cfg.augment);

        ForwardOptions opts;
        opts.training = true;
        opts.deterministic = cfg.deterministic;
        opts.seed = mix_seed(item_seed, 0xf02);

        Tape tape;
        PyramidState pyr = encoder_forward(tape, input, model, opts);
        DecoderOut dec = decoder_forward(tape, pyr, model, opts);
        LossBreakdown lb =
            composite_loss(tape, dec.main_logits, dec.aux_logits, input.labels, pyr, cfg.train);
        if (!std::isfinite(lb.total))
          throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                             " (last-good checkpoint: " + result.last_path + ")");
        tape.backward(lb.total_tensor);

        main_sum += lb.main;
        for (std::size_t a = 0; a < lb.aux.size(); ++a) aux_sum[a] += lb.aux[a];
        ++n_items;
        const std::size_t c = cfg.model.num_classes;
        for (std::size_t i = 0; i < input.size(); ++i) {
          int best = 0;
          for (std::size_t j = 1; j < c; ++j)
            if (dec.main_logits.cdata()[i * c + j] > dec.main_logits.cdata()[i * c + best])
              best = static_cast<int>(j);
          train_cm.add(input.labels[i], best);
        }
      }
      adam_step(model, adam, cfg.train);
      zero_gradients(model);
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.main_loss = main_sum / static_cast<double>(n_items);
    for (double a : aux_sum) entry.aux_loss.push_back(a / static_cast<double>(n_items));
    {
      const auto tm = train_cm.compute();
      entry.train_oa = tm.oa;
      entry.train_miou = tm.miou;
    }

    if (val_ds.size() > 0 && (epoch % cfg.val_every == 0 || epoch == cfg.train.epochs)) {
      EvalResult ev = evaluate_dataset(model, val_ds, cfg);
      entry.val_miou = ev.metrics.miou;
      if (entry.val_miou > result.best_val_miou) {
        result.best_val_miou = entry.val_miou;
        save_checkpoint(result.best_path, model, &adam);
      }
    }
    save_checkpoint(result.last_path, model, &adam);
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    emit(format_epoch_line(entry));
    result.log.push_back(std::move(entry));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Attention dumps
// ---------------------------------------------------------------------------

struct AttentionDumpResult {
  std::vector<std::string> files;
  std::size_t levels_covered = 0;
  bool eliminated = false;
  std::size_t eliminated_at = 0;
  std::size_t channel = 0;
};

/// Traces one input point through the sampling pyramid of its block and
/// writes, per surviving level and per block, a cloud whose scalar column is
/// the post-softmax attention score of the traced centroid's neighbors at
/// one channel; plus a grouped union across layers (label column = level).
inline AttentionDumpResult dump_attention(const SegModel& model, const PointCloud& scene,
                                          const RunConfig& cfg, std::size_t point_index,
                                          int channel, const std::string& out_dir) {
  namespace fs = std::filesystem;
  if (point_index >= scene.size())
    throw ValidationError("dump-attention: point index out of range");
  fs::create_directories(out_dir);

  const auto blocks = build_blocks(scene, cfg.block_size, cfg.min_block_points);
  const BlockView* home = nullptr;
  std::size_t local_index = 0;
  for (const auto& blk : blocks) {
    auto it = std::find(blk.indices.begin(), blk.indices.end(), point_index);
    if (it != blk.indices.end()) {
      home = &blk;
      local_index = static_cast<std::size_t>(it - blk.indices.begin());
      break;
    }
  }
  if (!home) throw ValidationError("dump-attention: point not assigned to any block");

  ForwardOptions opts;
  opts.training = false;
  opts.deterministic = true;
  Tape tape = Tape::inference();
  PyramidState pyr = encoder_forward(tape, home->local, model, opts);

  AttentionDumpResult result;
  CloudFile grouped_geo, grouped_lat;

  auto write_scores = [&](const std::string& name, const std::vector<Vec3>& nbr_points,
                          const std::vector<double>& scores, CloudFile* grouped,
                          std::size_t level) {
    CloudFile file;
    for (std::size_t i = 0; i < nbr_points.size(); ++i) {
      file.cloud.positions.push_back(home->frame.to_world(nbr_points[i]));
      file.scalars.push_back(scores[i]);
      if (grouped) {
        grouped->cloud.positions.push_back(file.cloud.positions.back());
        grouped->cloud.labels.push_back(static_cast<int>(level));
        grouped->scalars.push_back(scores[i]);
      }
    }
    const std::string path = (fs::path(out_dir) / name).string();
    write_cloud_file(file, path);
    result.files.push_back(path);
  };

  std::size_t traced = local_index;  // index within the current level
  for (std::size_t level = 1; level < pyr.levels.size(); ++level) {
    const LevelState& lvl = pyr.levels[level];
    const auto pos = std::find(lvl.fps_index.begin(), lvl.fps_index.end(), traced);
    if (pos == lvl.fps_index.end()) {
      result.eliminated = true;
      result.eliminated_at = level;
      break;
    }
    traced = static_cast<std::size_t>(pos - lvl.fps_index.begin());
    result.levels_covered = level;

    const AttentionTrace* traces[2] = {&lvl.trace_strided, &lvl.trace_same};
    const NeighborIndex* nbrs[2] = {&lvl.nbr_strided, &lvl.nbr_same};
    const std::vector<Vec3>* sources[2] = {&pyr.levels[level - 1].points, &lvl.points};
    for (int blk = 0; blk < 2; ++blk) {
      const AttentionTrace& tr = *traces[blk];
      const NeighborIndex& nb = *nbrs[blk];
      if (tr.d == 0) continue;  // maxpool mode records no scores
      const std::size_t d = result.channel =
          channel >= 0 ? static_cast<std::size_t>(channel) % tr.d
                       : mix_seed(cfg.seed, 0xd11 + level) % tr.d;
      std::vector<Vec3> nbr_points;
      std::vector<double> geo, lat;
      for (std::size_t k = 0; k < nb.k; ++k) {
        const std::size_t src = nb.neighbors[traced * nb.k + k];
        nbr_points.push_back((*sources[blk])[src]);
        const std::size_t at = (traced * nb.k + k) * tr.d + d;
        if (!tr.geo.empty()) geo.push_back(tr.geo[at]);
        if (!tr.lat.empty()) lat.push_back(tr.lat[at]);
      }
      const std::string tag = "L" + std::to_string(level) + "_block" + std::to_string(blk + 1);
      if (!geo.empty()) write_scores("attn_" + tag + "_geo.pts", nbr_points, geo, &grouped_geo, level);
      if (!lat.empty()) write_scores("attn_" + tag + "_lat.pts", nbr_points, lat, &grouped_lat, level);
    }
  }

  if (!grouped_geo.cloud.positions.empty()) {
    const std::string path = (fs::path(out_dir) / "attn_grouped_geo.pts").string();
    write_cloud_file(grouped_geo, path);
    result.files.push_back(path);
  }
  if (!grouped_lat.cloud.positions.empty()) {
    const std::string path = (fs::path(out_dir) / "attn_grouped_lat.pts").string();
    write_cloud_file(grouped_lat, path);
    result.files.push_back(path);
  }
  return result;
}

}  // namespace gelatto
