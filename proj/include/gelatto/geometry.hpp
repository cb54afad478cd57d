#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <unordered_map>
#include <vector>

#include "gelatto/common.hpp"
#include "gelatto/tensor.hpp"

namespace gelatto {

using Vec3 = std::array<double, 3>;

inline double sq_dist(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

inline bool lex_less(const Vec3& a, const Vec3& b) {
  if (a[0] != b[0]) return a[0] < b[0];
  if (a[1] != b[1]) return a[1] < b[1];
  return a[2] < b[2];
}

/// Positions in meters, optional colors in [0,1], optional labels in [0,C).
struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<Vec3> colors;  // empty = absent
  std::vector<int> labels;   // empty = absent

  std::size_t size() const { return positions.size(); }
  bool has_colors() const { return !colors.empty(); }
  bool has_labels() const { return !labels.empty(); }

  void validate(int num_classes = -1) const {
    if (positions.empty()) throw ValidationError("point cloud is empty");
    if (has_colors() && colors.size() != positions.size())
      throw ValidationError("color count does not match point count");
    if (has_labels() && labels.size() != positions.size())
      throw ValidationError("label count does not match point count");
    for (const Vec3& p : positions)
      for (double v : p)
        if (!std::isfinite(v)) throw ValidationError("non-finite position");
    if (has_labels())
      for (int l : labels) {
        if (l < 0) throw ValidationError("negative label");
        if (num_classes >= 0 && l >= num_classes)
          throw ValidationError("label " + std::to_string(l) + " out of class range [0," +
                                std::to_string(num_classes) + ")");
      }
  }
};

inline Tensor positions_to_tensor(const std::vector<Vec3>& pts) {
  std::vector<double> flat;
  flat.reserve(pts.size() * 3);
  for (const Vec3& p : pts) {
    flat.push_back(p[0]);
    flat.push_back(p[1]);
    flat.push_back(p[2]);
  }
  return Tensor::from_values({pts.size(), 3}, std::move(flat));
}

/// Per-centroid neighbor lists. neighbors[m*K + k] indexes the source cloud;
/// rows are padded by cycling in-radius candidates, so every entry is within
/// `radius` of its centroid.
struct NeighborIndex {
  std::vector<std::size_t> centroids;  // [M], indices into the query set's source
  std::vector<std::size_t> neighbors;  // [M*K] flattened
  double radius = 0.0;
  std::size_t k = 0;

  std::size_t rows() const { return k == 0 ? 0 : neighbors.size() / k; }
};

/// Uniform hash grid over 3D cells, cell size = query radius.
class GridIndex {
 public:
  GridIndex(const std::vector<Vec3>& points, double cell_size) : cell_(cell_size), points_(points) {
    if (cell_size <= 0) throw ContractError("GridIndex: cell size must be positive");
    cells_.reserve(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) cells_[key(points[i])].push_back(i);
  }

  /// Indices of all points with |p - q| <= radius (inclusive), sorted by
  /// (distance, lexicographic position, index) for determinism.
  std::vector<std::size_t> query_ball(const Vec3& q, double radius) const {
    const double r2 = radius * radius;
    std::vector<std::size_t> found;
    const std::int64_t cx = coord(q[0]);
    const std::int64_t cy = coord(q[1]);
    const std::int64_t cz = coord(q[2]);
    const std::int64_t reach = static_cast<std::int64_t>(std::ceil(radius / cell_));
    for (std::int64_t dx = -reach; dx <= reach; ++dx)
      for (std::int64_t dy = -reach; dy <= reach; ++dy)
        for (std::int64_t dz = -reach; dz <= reach; ++dz) {
          auto it = cells_.find(pack(cx + dx, cy + dy, cz + dz));
          if (it == cells_.end()) continue;
          for (std::size_t idx : it->second)
            if (sq_dist(points_[idx], q) <= r2) found.push_back(idx);
        }
    sort_candidates(found, q);
    return found;
  }

  void sort_candidates(std::vector<std::size_t>& cand, const Vec3& q) const {
    std::sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
      const double da = sq_dist(points_[a], q);
      const double db = sq_dist(points_[b], q);
      if (da != db) return da < db;
      if (points_[a] != points_[b]) return lex_less(points_[a], points_[b]);
      return a < b;
    });
  }

 private:
  std::int64_t coord(double v) const { return static_cast<std::int64_t>(std::floor(v / cell_)); }
  static std::uint64_t pack(std::int64_t x, std::int64_t y, std::int64_t z) {
    const std::uint64_t bias = 1u << 20;
    return ((static_cast<std::uint64_t>(x + bias) & 0x1FFFFF) << 42) |
           ((static_cast<std::uint64_t>(y + bias) & 0x1FFFFF) << 21) |
           (static_cast<std::uint64_t>(z + bias) & 0x1FFFFF);
  }
  std::uint64_t key(const Vec3& p) const { return pack(coord(p[0]), coord(p[1]), coord(p[2])); }

  double cell_;
  const std::vector<Vec3>& points_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells_;
};

/// Greedy farthest point sampling. The seed is the point nearest the cloud
/// centroid; every later pick maximizes min-distance to the picked set. Ties
/// break by lexicographic position, which makes the returned *set* invariant
/// under input permutation.
inline std::vector<std::size_t> farthest_point_sample(const std::vector<Vec3>& positions,
                                                      std::size_t m) {
  const std::size_t n = positions.size();
  if (m < 1 || m > n)
    throw ContractError("farthest_point_sample: m=" + std::to_string(m) + " out of [1," +
                        std::to_string(n) + "]");
  // Centroid summed in lexicographic order so the seed does not depend on
  // input ordering even in the last float bits.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return lex_less(positions[a], positions[b]); });
  Vec3 centroid = {0, 0, 0};
  for (std::size_t i : order)
    for (int c = 0; c < 3; ++c) centroid[c] += positions[i][c];
  for (int c = 0; c < 3; ++c) centroid[c] /= static_cast<double>(n);

  auto better = [&](double cand_d, std::size_t cand, double best_d, std::size_t best, bool maximize) {
    if (cand_d != best_d) return maximize ? cand_d > best_d : cand_d < best_d;
    return lex_less(positions[cand], positions[best]);
  };

  std::size_t seed = 0;
  double seed_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const double d = sq_dist(positions[i], centroid);
    if (seed_d == std::numeric_limits<double>::infinity() || better(d, i, seed_d, seed, false)) {
      seed_d = d;
      seed = i;
    }
  }

  std::vector<std::size_t> picks;
  picks.reserve(m);
  picks.push_back(seed);
  std::vector<bool> picked(n, false);
  picked[seed] = true;
  std::vector<double> min_d2(n);
  for (std::size_t i = 0; i < n; ++i) min_d2[i] = sq_dist(positions[i], positions[seed]);
  while (picks.size() < m) {
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (picked[i]) continue;
      if (best == n || better(min_d2[i], i, best_d, best, true)) {
        best_d = min_d2[i];
        best = i;
      }
    }
    picks.push_back(best);
    picked[best] = true;
    for (std::size_t i = 0; i < n; ++i) min_d2[i] = std::min(min_d2[i], sq_dist(positions[i], positions[best]));
  }
  return picks;
}

struct NeighborMode {
  bool deterministic = true;
  std::uint64_t seed = 0;

  static NeighborMode det() { return {true, 0}; }
  static NeighborMode seeded(std::uint64_t s) { return {false, s}; }
};

/// Groups each query with K source points inside `radius`. Deterministic mode
/// takes the K nearest; seeded mode picks K uniformly without replacement.
/// Under-populated balls pad by cycling the candidate list.
inline NeighborIndex radius_neighbors(const std::vector<Vec3>& queries,
                                      const std::vector<Vec3>& source, double radius,
                                      std::size_t k, NeighborMode mode,
                                      const std::vector<std::size_t>* query_ids = nullptr) {
  if (radius <= 0) throw ContractError("radius_neighbors: radius must be positive");
  if (k < 1) throw ContractError("radius_neighbors: K must be >= 1");
  GridIndex grid(source, radius);
  NeighborIndex out;
  out.radius = radius;
  out.k = k;
  out.neighbors.resize(queries.size() * k);
  out.centroids.resize(queries.size());
  for (std::size_t m = 0; m < queries.size(); ++m) {
    out.centroids[m] = query_ids ? (*query_ids)[m] : m;
    std::vector<std::size_t> cand = grid.query_ball(queries[m], radius);
    if (cand.empty())
      throw ContractError("radius_neighbors: empty neighborhood for query " + std::to_string(m));
    std::size_t* row = out.neighbors.data() + m * k;
    if (cand.size() >= k) {
      if (mode.deterministic) {
        std::copy_n(cand.begin(), k, row);
      } else {
        Rng rng(mix_seed(mode.seed, m));
        // partial Fisher-Yates: first k entries become the sample
        for (std::size_t j = 0; j < k; ++j) {
          std::uniform_int_distribution<std::size_t> pick(j, cand.size() - 1);
          std::swap(cand[j], cand[pick(rng)]);
          row[j] = cand[j];
        }
      }
    } else {
      for (std::size_t j = 0; j < k; ++j) row[j] = cand[j % cand.size()];
    }
  }
  return out;
}

/// Brute-force ball scan, same ordering contract as GridIndex::query_ball.
/// Test oracle for radius_neighbors.
inline std::vector<std::size_t> brute_force_ball(const Vec3& q, const std::vector<Vec3>& source,
                                                 double radius) {
  const double r2 = radius * radius;
  std::vector<std::size_t> found;
  for (std::size_t i = 0; i < source.size(); ++i)
    if (sq_dist(source[i], q) <= r2) found.push_back(i);
  std::sort(found.begin(), found.end(), [&](std::size_t a, std::size_t b) {
    const double da = sq_dist(source[a], q);
    const double db = sq_dist(source[b], q);
    if (da != db) return da < db;
    if (source[a] != source[b]) return lex_less(source[a], source[b]);
    return a < b;
  });
  return found;
}

/// 3-nearest-neighbor inverse-distance weights for feature up-sampling.
struct InterpolationPlan {
  std::vector<std::size_t> indices;  // [Nt * k]
  std::vector<double> weights;       // [Nt * k]
  std::size_t k = 0;
};

inline InterpolationPlan plan_interpolation(const std::vector<Vec3>& targets,
                                            const std::vector<Vec3>& sources) {
  if (sources.empty()) throw ContractError("interpolate: no source points");
  constexpr double kEps = 1e-8;
  const std::size_t k = std::min<std::size_t>(3, sources.size());
  InterpolationPlan plan;
  plan.k = k;
  plan.indices.resize(targets.size() * k);
  plan.weights.resize(targets.size() * k);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    // best-k selection with (distance, lex position, index) ordering
    std::array<std::size_t, 3> idx{};
    std::array<double, 3> d2;
    d2.fill(std::numeric_limits<double>::infinity());
    for (std::size_t s = 0; s < sources.size(); ++s) {
      const double d = sq_dist(sources[s], targets[t]);
      std::size_t pos = k;
      while (pos > 0) {
        const bool closer =
            d < d2[pos - 1] ||
            (d == d2[pos - 1] && (lex_less(sources[s], sources[idx[pos - 1]]) ||
                                  (sources[s] == sources[idx[pos - 1]] && s < idx[pos - 1])));
        if (!closer) break;
        --pos;
      }
      if (pos < k) {
        for (std::size_t j = k - 1; j > pos; --j) {
          d2[j] = d2[j - 1];
          idx[j] = idx[j - 1];
        }
        d2[pos] = d;
        idx[pos] = s;
      }
    }
    double wsum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double w = 1.0 / (std::sqrt(d2[j]) + kEps);
      plan.weights[t * k + j] = w;
      wsum += w;
    }
    for (std::size_t j = 0; j < k; ++j) {
      plan.weights[t * k + j] /= wsum;
      plan.indices[t * k + j] = idx[j];
    }
  }
  return plan;
}

/// out[t,:] = sum_j w_j * features[nn_j(t), :]; differentiable w.r.t. features.
inline Tensor interpolate_features(Tape& tape, const std::vector<Vec3>& targets,
                                   const std::vector<Vec3>& sources, const Tensor& features) {
  detail::require(features.rank() == 2 && features.dim(0) == sources.size(),
                  "interpolate_features: features " + shape_str(features.shape()) +
                      " do not match source count " + std::to_string(sources.size()));
  const InterpolationPlan plan = plan_interpolation(targets, sources);
  const std::size_t nt = targets.size();
  const std::size_t d = features.dim(1);
  Tensor gathered = gather_rows(tape, features, std::span<const std::size_t>(plan.indices),
                                Shape{nt, plan.k});          // [Nt,k,D]
  std::vector<double> wrep(nt * plan.k * d);
  for (std::size_t i = 0; i < nt * plan.k; ++i)
    for (std::size_t j = 0; j < d; ++j) wrep[i * d + j] = plan.weights[i];
  Tensor w = Tensor::from_values({nt, plan.k, d}, std::move(wrep));
  return reduce(tape, mul(tape, gathered, w), 1, Reduce::Sum);  // [Nt,D]
}

/// Axis-aligned xy partition anchored at the cloud's min corner; z unbounded.
/// Blocks ordered by (cell_x, cell_y); empty blocks omitted.
inline std::vector<std::vector<std::size_t>> partition_blocks(const PointCloud& cloud,
                                                              double block_xy) {
  if (block_xy <= 0) throw ContractError("partition_blocks: block size must be positive");
  double minx = std::numeric_limits<double>::infinity();
  double miny = minx;
  for (const Vec3& p : cloud.positions) {
    minx = std::min(minx, p[0]);
    miny = std::min(miny, p[1]);
  }
  std::map<std::pair<std::int64_t, std::int64_t>, std::vector<std::size_t>> blocks;
  for (std::size_t i = 0; i < cloud.positions.size(); ++i) {
    const Vec3& p = cloud.positions[i];
    const auto bx = static_cast<std::int64_t>(std::floor((p[0] - minx) / block_xy));
    const auto by = static_cast<std::int64_t>(std::floor((p[1] - miny) / block_xy));
    blocks[{bx, by}].push_back(i);
  }
  std::vector<std::vector<std::size_t>> out;
  out.reserve(blocks.size());
  for (auto& [cell, idx] : blocks) out.push_back(std::move(idx));
  return out;
}

/// Offset that maps normalized block coordinates back to the original frame.
struct BlockFrame {
  Vec3 offset = {0, 0, 0};  // (center_x, center_y, min_z)

  Vec3 to_local(const Vec3& p) const { return {p[0] - offset[0], p[1] - offset[1], p[2] - offset[2]}; }
  Vec3 to_world(const Vec3& p) const { return {p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]}; }
};

/// Centers xy on the block's bounding box and rebases z to the block minimum.
inline std::vector<Vec3> normalize_block(const std::vector<Vec3>& points, BlockFrame& frame) {
  if (points.empty()) throw ContractError("normalize_block: empty block");
  Vec3 lo = points[0];
  Vec3 hi = points[0];
  for (const Vec3& p : points)
    for (int c = 0; c < 3; ++c) {
      lo[c] = std::min(lo[c], p[c]);
      hi[c] = std::max(hi[c], p[c]);
    }
  frame.offset = {(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, lo[2]};
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const Vec3& p : points) out.push_back(frame.to_local(p));
  return out;
}

}  // namespace gelatto
