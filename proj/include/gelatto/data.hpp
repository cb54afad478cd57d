#pragma once

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gelatto/geometry.hpp"
#include "gelatto/tensor.hpp"

namespace gelatto {

// ---------------------------------------------------------------------------
// Point cloud file IO
//
// ASCII format: header "pts <N> cols <schema>" with schema tokens drawn from
// {xyz, rgb, l, s} in that order, one point per line, space-separated, f64
// text at 9 significant digits. `s` carries a scalar channel (attention
// scores). The binary variant starts with the magic "GLPB1".
// ---------------------------------------------------------------------------

/// Extends PointCloud with the optional scalar column used by dump files.
struct CloudFile {
  PointCloud cloud;
  std::vector<double> scalars;  // empty = absent
};

namespace iodetail {

inline std::string schema_of(const PointCloud& cloud, const std::vector<double>& scalars) {
  std::string s = "xyz";
  if (cloud.has_colors()) s += "rgb";
  if (cloud.has_labels()) s += "l";
  if (!scalars.empty()) s += "s";
  return s;
}

inline void parse_schema(const std::string& schema, bool& rgb, bool& label, bool& scalar) {
  std::size_t pos = 0;
  rgb = label = scalar = false;
  if (schema.rfind("xyz", 0) != 0) throw ParseError("schema must start with xyz, got '" + schema + "'");
  pos = 3;
  if (schema.compare(pos, 3, "rgb") == 0) {
    rgb = true;
    pos += 3;
  }
  if (pos < schema.size() && schema[pos] == 'l') {
    label = true;
    ++pos;
  }
  if (pos < schema.size() && schema[pos] == 's') {
    scalar = true;
    ++pos;
  }
  if (pos != schema.size()) throw ParseError("unknown schema token in '" + schema + "'");
}

constexpr char kBinaryMagic[] = "GLPB1";

}  // namespace iodetail

inline void write_cloud_file(const CloudFile& file, const std::string& path) {
  const PointCloud& cloud = file.cloud;
  cloud.validate();
  if (!file.scalars.empty() && file.scalars.size() != cloud.size())
    throw ValidationError("scalar column length mismatch");
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out << "pts " << cloud.size() << " cols " << iodetail::schema_of(cloud, file.scalars) << "\n";
  char buf[64];
  auto emit = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.9g", v);
    out << buf;
  };
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      if (c) out << ' ';
      emit(cloud.positions[i][c]);
    }
    if (cloud.has_colors())
      for (int c = 0; c < 3; ++c) {
        out << ' ';
        emit(cloud.colors[i][c]);
      }
    if (cloud.has_labels()) out << ' ' << cloud.labels[i];
    if (!file.scalars.empty()) {
      out << ' ';
      emit(file.scalars[i]);
    }
    out << '\n';
  }
}

inline void write_cloud(const PointCloud& cloud, const std::string& path) {
  write_cloud_file({cloud, {}}, path);
}

inline void write_cloud_binary(const CloudFile& file, const std::string& path) {
  const PointCloud& cloud = file.cloud;
  cloud.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out.write(iodetail::kBinaryMagic, 5);
  const std::uint64_t n = cloud.size();
  const std::uint8_t flags = (cloud.has_colors() ? 1 : 0) | (cloud.has_labels() ? 2 : 0) |
                             (!file.scalars.empty() ? 4 : 0);
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(reinterpret_cast<const char*>(&flags), 1);
  out.write(reinterpret_cast<const char*>(cloud.positions.data()), n * 24);
  if (cloud.has_colors()) out.write(reinterpret_cast<const char*>(cloud.colors.data()), n * 24);
  if (cloud.has_labels()) {
    std::vector<std::int32_t> lab(cloud.labels.begin(), cloud.labels.end());
    out.write(reinterpret_cast<const char*>(lab.data()), n * 4);
  }
  if (!file.scalars.empty())
    out.write(reinterpret_cast<const char*>(file.scalars.data()), n * 8);
}

inline CloudFile read_cloud_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  char magic[5] = {};
  in.read(magic, 5);
  if (in.gcount() == 5 && std::memcmp(magic, iodetail::kBinaryMagic, 5) == 0) {
    CloudFile file;
    std::uint64_t n = 0;
    std::uint8_t flags = 0;
    in.read(reinterpret_cast<char*>(&n), 8);
    in.read(reinterpret_cast<char*>(&flags), 1);
    if (!in) throw ParseError(path + ": truncated binary header");
    file.cloud.positions.resize(n);
    in.read(reinterpret_cast<char*>(file.cloud.positions.data()), n * 24);
    if (flags & 1) {
      file.cloud.colors.resize(n);
      in.read(reinterpret_cast<char*>(file.cloud.colors.data()), n * 24);
    }
    if (flags & 2) {
      std::vector<std::int32_t> lab(n);
      in.read(reinterpret_cast<char*>(lab.data()), n * 4);
      file.cloud.labels.assign(lab.begin(), lab.end());
    }
    if (flags & 4) {
      file.scalars.resize(n);
      in.read(reinterpret_cast<char*>(file.scalars.data()), n * 8);
    }
    if (!in) throw ParseError(path + ": truncated binary payload");
    return file;
  }

  in.clear();
  in.seekg(0);
  std::string header;
  if (!std::getline(in, header)) throw ParseError(path + ": empty file");
  std::istringstream hs(header);
  std::string tok_pts, tok_cols, schema;
  std::size_t n = 0;
  if (!(hs >> tok_pts >> n >> tok_cols >> schema) || tok_pts != "pts" || tok_cols != "cols")
    throw ParseError(path + ":1: bad header '" + header + "'");
  bool rgb = false, label = false, scalar = false;
  iodetail::parse_schema(schema, rgb, label, scalar);

  CloudFile file;
  file.cloud.positions.reserve(n);
  std::string line;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line))
      throw ParseError(path + ": expected " + std::to_string(n) + " points, file ends at " +
                       std::to_string(i));
    std::istringstream ls(line);
    Vec3 p;
    if (!(ls >> p[0] >> p[1] >> p[2]))
      throw ParseError(path + ":" + std::to_string(i + 2) + ": malformed point line");
    file.cloud.positions.push_back(p);
    if (rgb) {
      Vec3 c;
      if (!(ls >> c[0] >> c[1] >> c[2]))
        throw ParseError(path + ":" + std::to_string(i + 2) + ": missing rgb columns");
      file.cloud.colors.push_back(c);
    }
    if (label) {
      int l;
      if (!(ls >> l)) throw ParseError(path + ":" + std::to_string(i + 2) + ": missing label");
      file.cloud.labels.push_back(l);
    }
    if (scalar) {
      double s;
      if (!(ls >> s)) throw ParseError(path + ":" + std::to_string(i + 2) + ": missing scalar");
      file.scalars.push_back(s);
    }
    std::string rest;
    if (ls >> rest)
      throw ParseError(path + ":" + std::to_string(i + 2) + ": trailing data '" + rest + "'");
  }
  return file;
}

inline PointCloud read_cloud(const std::string& path) { return read_cloud_file(path).cloud; }

// ---------------------------------------------------------------------------
// Synthetic labeled scenes
// ---------------------------------------------------------------------------

enum class SurfaceKind { Floor, Walls, Sphere, Box };

struct SceneClassSpec {
  std::string name;
  SurfaceKind kind = SurfaceKind::Floor;
  double density = 100.0;  // points per square meter of surface
  Vec3 base_color = {0.5, 0.5, 0.5};
  double size = 0.3;  // sphere radius / box half-edge
};

struct SceneSpec {
  std::uint64_t seed = 0;
  Vec3 extent = {1.9, 1.9, 2.4};  // room size in meters
  double noise_sigma = 0.01;      // positional jitter
  double color_noise = 0.05;
  double wall_clearance = 0.1;    // walls start this far above the floor
  std::vector<SceneClassSpec> classes;

  void validate() const {
    if (extent[0] <= 0 || extent[1] <= 0 || extent[2] <= 0)
      throw ValidationError("scene: extents must be positive");
    if (classes.size() < 2) throw ValidationError("scene: need at least 2 classes");
    for (const auto& c : classes)
      if (c.density <= 0) throw ValidationError("scene: densities must be positive");
  }

  /// The floor/wall/sphere benchmark room, ~2050 points.
  static SceneSpec toy3(std::uint64_t seed) {
    SceneSpec s;
    s.seed = seed;
    s.classes = {
        {"floor", SurfaceKind::Floor, 280.0, {0.45, 0.45, 0.45}, 0.0},
        {"wall", SurfaceKind::Walls, 45.0, {0.70, 0.70, 0.90}, 0.0},
        {"sphere", SurfaceKind::Sphere, 220.0, {0.90, 0.20, 0.20}, 0.30},
    };
    return s;
  }
};

/// Placement metadata for generated scenes (per class; spheres and boxes
/// record their center, surface classes a zero vector).
struct SceneInfo {
  std::vector<Vec3> centers;
};

/// Deterministic under the recipe seed: surface points with Gaussian jitter,
/// labels from the generating class, colors = class base color + noise.
/// Accepts single-class specs; SceneSpec::validate (the config-facing
/// contract) demands two or more.
inline PointCloud generate_scene(const SceneSpec& spec, SceneInfo* info = nullptr) {
  if (spec.classes.empty()) throw ValidationError("scene: no classes");
  for (const auto& c : spec.classes)
    if (c.density <= 0) throw ValidationError("scene: densities must be positive");
  Rng rng(mix_seed(spec.seed, 0x5ce9e));
  std::normal_distribution<double> jitter(0.0, spec.noise_sigma);
  std::normal_distribution<double> cnoise(0.0, spec.color_noise);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  PointCloud cloud;
  const double ex = spec.extent[0], ey = spec.extent[1], ez = spec.extent[2];

  auto push = [&](Vec3 p, int label, const Vec3& base) {
    for (int c = 0; c < 3; ++c) p[c] += jitter(rng);
    Vec3 col;
    for (int c = 0; c < 3; ++c) col[c] = std::clamp(base[c] + cnoise(rng), 0.0, 1.0);
    cloud.positions.push_back(p);
    cloud.colors.push_back(col);
    cloud.labels.push_back(label);
  };

  if (info) info->centers.assign(spec.classes.size(), {0, 0, 0});
  for (std::size_t ci = 0; ci < spec.classes.size(); ++ci) {
    const SceneClassSpec& cls = spec.classes[ci];
    const int label = static_cast<int>(ci);
    switch (cls.kind) {
      case SurfaceKind::Floor: {
        const auto count = static_cast<std::size_t>(std::llround(cls.density * ex * ey));
        for (std::size_t i = 0; i < count; ++i)
          push({uni(rng) * ex, uni(rng) * ey, 0.0}, label, cls.base_color);
        break;
      }
      case SurfaceKind::Walls: {
        const double h = ez - spec.wall_clearance;
        const double area = 2.0 * (ex + ey) * h;
        const auto count = static_cast<std::size_t>(std::llround(cls.density * area));
        const double perimeter = 2.0 * (ex + ey);
        for (std::size_t i = 0; i < count; ++i) {
          double along = uni(rng) * perimeter;
          const double z = spec.wall_clearance + uni(rng) * h;
          Vec3 p;
          if (along < ex) p = {along, 0.0, z};
          else if ((along -= ex) < ey) p = {ex, along, z};
          else if ((along -= ey) < ex) p = {ex - along, ey, z};
          else p = {0.0, along - ex, z};
          push(p, label, cls.base_color);
        }
        break;
      }
      case SurfaceKind::Sphere: {
        const double r = cls.size;
        const double margin = r + 3.0 * spec.noise_sigma + spec.wall_clearance;
        Vec3 center = {margin + uni(rng) * (ex - 2 * margin), margin + uni(rng) * (ey - 2 * margin),
                       margin + uni(rng) * (ez - 2 * margin)};
        if (info) info->centers[ci] = center;
        const auto count =
            static_cast<std::size_t>(std::llround(cls.density * 4.0 * M_PI * r * r));
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (std::size_t i = 0; i < count; ++i) {
          Vec3 dir = {gauss(rng), gauss(rng), gauss(rng)};
          double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
          if (norm < 1e-12) {
            dir = {1, 0, 0};
            norm = 1;
          }
          push({center[0] + r * dir[0] / norm, center[1] + r * dir[1] / norm,
                center[2] + r * dir[2] / norm},
               label, cls.base_color);
        }
        break;
      }
      case SurfaceKind::Box: {
        const double hs = cls.size;
        const double margin = hs + 3.0 * spec.noise_sigma + spec.wall_clearance;
        Vec3 center = {margin + uni(rng) * (ex - 2 * margin), margin + uni(rng) * (ey - 2 * margin),
                       margin + uni(rng) * (ez - 2 * margin)};
        if (info) info->centers[ci] = center;
        const auto count =
            static_cast<std::size_t>(std::llround(cls.density * 24.0 * hs * hs));
        std::uniform_int_distribution<int> face(0, 5);
        for (std::size_t i = 0; i < count; ++i) {
          const int f = face(rng);
          const double u = (uni(rng) * 2 - 1) * hs;
          const double v = (uni(rng) * 2 - 1) * hs;
          Vec3 p = center;
          const double side = (f % 2 == 0) ? hs : -hs;
          if (f / 2 == 0) { p[0] += side; p[1] += u; p[2] += v; }
          else if (f / 2 == 1) { p[1] += side; p[0] += u; p[2] += v; }
          else { p[2] += side; p[0] += u; p[1] += v; }
          push(p, label, cls.base_color);
        }
        break;
      }
    }
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentOptions {
  bool scale = true;          // uniform in [0.9, 1.1]
  bool flip = true;           // random x/y sign flips
  bool rotate = true;         // about z, uniform angle
  bool jitter = true;         // N(0, 0.01 m) clipped to +-0.05
  bool color_permute = true;  // uniform over the 6 channel orders
  bool color_noise = true;    // N(0, 0.02) result clipped to [0,1]
  double scale_lo = 0.9, scale_hi = 1.1;
  double jitter_sigma = 0.01, jitter_clip = 0.05;
  double color_sigma = 0.02;

  static AugmentOptions none() {
    AugmentOptions o;
    o.scale = o.flip = o.rotate = o.jitter = o.color_permute = o.color_noise = false;
    return o;
  }
};

inline void scale_uniform(PointCloud& cloud, double factor) {
  for (Vec3& p : cloud.positions)
    for (int c = 0; c < 3; ++c) p[c] *= factor;
}

inline void flip_axis(PointCloud& cloud, int axis) {
  for (Vec3& p : cloud.positions) p[axis] = -p[axis];
}

inline void rotate_z(PointCloud& cloud, double angle) {
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (Vec3& p : cloud.positions) {
    const double x = p[0], y = p[1];
    p[0] = ca * x - sa * y;
    p[1] = sa * x + ca * y;
  }
}

inline void jitter_positions(PointCloud& cloud, double sigma, double clip, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, sigma);
  for (Vec3& p : cloud.positions)
    for (int c = 0; c < 3; ++c) p[c] += std::clamp(gauss(rng), -clip, clip);
}

inline void permute_colors(PointCloud& cloud, const std::array<int, 3>& perm) {
  for (Vec3& c : cloud.colors) c = {c[perm[0]], c[perm[1]], c[perm[2]]};
}

inline void add_color_noise(PointCloud& cloud, double sigma, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, sigma);
  for (Vec3& c : cloud.colors)
    for (int i = 0; i < 3; ++i) c[i] = std::clamp(c[i] + gauss(rng), 0.0, 1.0);
}

/// Seeded geometric + color augmentation; labels untouched.
inline PointCloud augment(const PointCloud& input, std::uint64_t seed, const AugmentOptions& opts) {
  PointCloud cloud = input;
  Rng rng(mix_seed(seed, 0xa46));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  if (opts.scale) scale_uniform(cloud, opts.scale_lo + uni(rng) * (opts.scale_hi - opts.scale_lo));
  if (opts.flip) {
    if (uni(rng) < 0.5) flip_axis(cloud, 0);
    if (uni(rng) < 0.5) flip_axis(cloud, 1);
  }
  if (opts.rotate) rotate_z(cloud, uni(rng) * 2.0 * M_PI);
  if (opts.jitter) jitter_positions(cloud, opts.jitter_sigma, opts.jitter_clip, rng);
  if (cloud.has_colors()) {
    if (opts.color_permute) {
      static constexpr std::array<std::array<int, 3>, 6> kPerms = {
          {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
      std::uniform_int_distribution<int> pick(0, 5);
      permute_colors(cloud, kPerms[pick(rng)]);
    }
    if (opts.color_noise) add_color_noise(cloud, opts.color_sigma, rng);
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Fixed-size sampling and test-time voting
// ---------------------------------------------------------------------------

/// Uniform sample of n indices without replacement when the cloud is big
/// enough; otherwise a shuffled full pass cycled up to n.
inline std::vector<std::size_t> sample_fixed(std::size_t n_points, std::size_t n,
                                             std::uint64_t seed) {
  if (n < 1) throw ContractError("sample_fixed: n must be >= 1");
  Rng rng(mix_seed(seed, 0x5a3e));
  std::vector<std::size_t> all(n_points);
  for (std::size_t i = 0; i < n_points; ++i) all[i] = i;
  if (n_points >= n) {
    std::vector<std::size_t> out;
    out.reserve(n);
    std::sample(all.begin(), all.end(), std::back_inserter(out), n, rng);
    return out;
  }
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = all[i % n_points];
  return out;
}

/// A seeded permutation chunked into ceil(N/n) windows of exactly n; the last
/// window tops up with points already covered by earlier windows. Every point
/// appears in at least one window, and only once except in the top-up.
inline std::vector<std::vector<std::size_t>> coverage_sampler(std::size_t n_points, std::size_t n,
                                                              std::uint64_t seed) {
  if (n < 1) throw ContractError("coverage_sampler: n must be >= 1");
  Rng rng(mix_seed(seed, 0xc0fe));
  std::vector<std::size_t> perm(n_points);
  for (std::size_t i = 0; i < n_points; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t windows = (n_points + n - 1) / n;
  std::vector<std::vector<std::size_t>> out(windows);
  for (std::size_t w = 0; w < windows; ++w) {
    auto& win = out[w];
    win.reserve(n);
    for (std::size_t j = w * n; j < std::min((w + 1) * n, n_points); ++j) win.push_back(perm[j]);
    for (std::size_t j = 0; win.size() < n; ++j) win.push_back(perm[j % n_points]);
  }
  return out;
}

/// Sums per-window softmax outputs per original point; the highest summed
/// value wins at finalize (ties to the lowest class index).
class VoteAccumulator {
 public:
  VoteAccumulator(std::size_t n_points, std::size_t n_classes)
      : classes_(n_classes), sums_(n_points * n_classes, 0.0), coverage_(n_points, 0) {}

  void update(std::span<const std::size_t> window, const Tensor& softmax) {
    if (softmax.rank() != 2 || softmax.dim(0) != window.size() || softmax.dim(1) != classes_)
      throw DimensionError("vote_update: softmax shape does not match window");
    const double* p = softmax.cdata();
    for (std::size_t r = 0; r < window.size(); ++r) {
      double row_sum = 0.0;
      for (std::size_t c = 0; c < classes_; ++c) row_sum += p[r * classes_ + c];
      if (std::abs(row_sum - 1.0) > 1e-6)
        throw ContractError("vote_update: softmax row does not sum to 1");
      const std::size_t idx = window[r];
      if (idx >= coverage_.size()) throw IndexError("vote_update: window index out of range");
      for (std::size_t c = 0; c < classes_; ++c) sums_[idx * classes_ + c] += p[r * classes_ + c];
      coverage_[idx] += 1;
    }
  }

  const std::vector<std::uint32_t>& coverage() const { return coverage_; }

  std::vector<int> finalize() const {
    std::vector<int> labels(coverage_.size());
    for (std::size_t i = 0; i < coverage_.size(); ++i) {
      if (coverage_[i] == 0)
        throw ContractError("vote_finalize: point " + std::to_string(i) + " was never covered");
      int best = 0;
      for (std::size_t c = 1; c < classes_; ++c)
        if (sums_[i * classes_ + c] > sums_[i * classes_ + best]) best = static_cast<int>(c);
      labels[i] = best;
    }
    return labels;
  }

 private:
  std::size_t classes_;
  std::vector<double> sums_;
  std::vector<std::uint32_t> coverage_;
};

}  // namespace gelatto
