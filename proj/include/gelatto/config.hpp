#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gelatto/data.hpp"
#include "gelatto/network.hpp"

namespace gelatto {

// ---------------------------------------------------------------------------
// Plain-text key-value config with [sections]. '#' starts a comment. Sections
// and keys keep insertion order so serialization is canonical.
// ---------------------------------------------------------------------------

struct KvFile {
  struct Section {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;

    const std::string* find(const std::string& key) const {
      for (const auto& [k, v] : entries)
        if (k == key) return &v;
      return nullptr;
    }
    void set(const std::string& key, const std::string& value) { entries.push_back({key, value}); }
  };
  std::vector<Section> sections;

  Section* find(const std::string& name) {
    for (auto& s : sections)
      if (s.name == name) return &s;
    return nullptr;
  }
  const Section* find(const std::string& name) const {
    for (const auto& s : sections)
      if (s.name == name) return &s;
    return nullptr;
  }
  Section& section(const std::string& name) {
    if (Section* s = find(name)) return *s;
    sections.push_back({name, {}});
    return sections.back();
  }

  static KvFile parse(std::istream& in, const std::string& origin = "<config>") {
    KvFile file;
    std::string line;
    std::size_t lineno = 0;
    Section* current = nullptr;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      auto strip = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      line = strip(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw ParseError(origin + ":" + std::to_string(lineno) + ": unterminated section header");
        current = &file.section(strip(line.substr(1, line.size() - 2)));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ParseError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      if (!current)
        throw ParseError(origin + ":" + std::to_string(lineno) + ": key outside any [section]");
      current->set(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
    }
    return file;
  }

  static KvFile parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open config '" + path + "'");
    return parse(in, path);
  }

  std::string serialize() const {
    std::ostringstream out;
    for (const auto& s : sections) {
      out << '[' << s.name << "]\n";
      for (const auto& [k, v] : s.entries) out << k << " = " << v << "\n";
      out << "\n";
    }
    return out.str();
  }

  void write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot open '" + path + "' for writing");
    out << serialize();
  }
};

namespace cfgdetail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline double to_double(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (...) {
    throw ParseError("config: bad number '" + s + "' for " + key);
  }
}

inline std::uint64_t to_u64(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const std::uint64_t v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (...) {
    throw ParseError("config: bad integer '" + s + "' for " + key);
  }
}

inline bool to_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ParseError("config: bad boolean '" + s + "' for " + key);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string tok;
  std::istringstream is(s);
  while (std::getline(is, tok, ',')) {
    const auto b = tok.find_first_not_of(" \t");
    const auto e = tok.find_last_not_of(" \t");
    out.push_back(b == std::string::npos ? "" : tok.substr(b, e - b + 1));
  }
  return out;
}

inline std::vector<double> to_doubles(const std::string& s, const std::string& key) {
  std::vector<double> out;
  for (const auto& t : split_list(s)) out.push_back(to_double(t, key));
  return out;
}

inline std::vector<std::uint64_t> to_u64s(const std::string& s, const std::string& key) {
  std::vector<std::uint64_t> out;
  for (const auto& t : split_list(s)) out.push_back(to_u64(t, key));
  return out;
}

inline std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

template <typename T>
inline std::string join_ints(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

/// Tracks which keys a section consumed; leftovers are a config error.
struct SectionReader {
  const KvFile::Section* section;
  std::set<std::string> consumed;

  explicit SectionReader(const KvFile::Section* s) : section(s) {}

  const std::string* get(const std::string& key) {
    if (!section) return nullptr;
    consumed.insert(key);
    return section->find(key);
  }
  void finish() const {
    if (!section) return;
    for (const auto& [k, v] : section->entries)
      if (!consumed.count(k))
        throw ParseError("config: unknown key '" + k + "' in section [" + section->name + "]");
  }
};

}  // namespace cfgdetail

/// Everything a run needs: paths, model and training configuration, ablation
/// flags, augmentation toggles, and the synthetic-scene recipe.
struct RunConfig {
  // [run]
  std::string data_dir;
  std::string checkpoint;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::size_t threads = 0;  // 0 = GELATTO_THREADS or hardware
  std::size_t input_points = 6144;
  double block_size = 2.0;
  std::size_t val_every = 1;
  std::size_t min_block_points = 8;

  ModelConfig model = ModelConfig::defaults(3);
  TrainConfig train;

  bool augment_enabled = true;
  AugmentOptions augment;

  SceneSpec scene = SceneSpec::toy3(0);
  std::size_t synth_train_count = 64;
  std::size_t synth_test_count = 16;

  void validate() const {
    model.validate();
    train.validate();
    if (block_size <= 0) throw ValidationError("run: block size must be positive");
    if (input_points < 8) throw ValidationError("run: input_points must be >= 8");
    if (train.aux_weights.size() != model.levels.size())
      throw ValidationError("run: need one aux weight per encoder level");
  }

  static RunConfig from_kv(const KvFile& kv);
  static RunConfig from_file(const std::string& path) { return from_kv(KvFile::parse_file(path)); }
  KvFile to_kv() const;
};

inline RunConfig RunConfig::from_kv(const KvFile& kv) {
  RunConfig cfg;
  for (const auto& s : kv.sections) {
    if (s.name != "run" && s.name != "model" && s.name != "train" && s.name != "augment" &&
        s.name != "scene" && s.name.rfind("class.", 0) != 0)
      throw ParseError("config: unknown section [" + s.name + "]");
  }
  using namespace cfgdetail;
  {
    SectionReader r(kv.find("run"));
    if (auto* v = r.get("data")) cfg.data_dir = *v;
    if (auto* v = r.get("checkpoint")) cfg.checkpoint = *v;
    if (auto* v = r.get("out")) cfg.out_dir = *v;
    if (auto* v = r.get("seed")) cfg.seed = to_u64(*v, "run.seed");
    if (auto* v = r.get("deterministic")) cfg.deterministic = to_bool(*v, "run.deterministic");
    if (auto* v = r.get("threads")) cfg.threads = to_u64(*v, "run.threads");
    if (auto* v = r.get("input_points")) cfg.input_points = to_u64(*v, "run.input_points");
    if (auto* v = r.get("block_size")) cfg.block_size = to_double(*v, "run.block_size");
    if (auto* v = r.get("val_every")) cfg.val_every = to_u64(*v, "run.val_every");
    if (auto* v = r.get("min_block_points")) cfg.min_block_points = to_u64(*v, "run.min_block_points");
    r.finish();
  }
  {
    SectionReader r(kv.find("model"));
    if (auto* v = r.get("num_classes")) cfg.model.num_classes = to_u64(*v, "model.num_classes");
    if (auto* v = r.get("stem_width")) cfg.model.stem_width = to_u64(*v, "model.stem_width");
    const std::string* samples = r.get("samples");
    const std::string* radii = r.get("radii");
    const std::string* neighbors = r.get("neighbors");
    const std::string* widths = r.get("widths");
    if (samples || radii || neighbors || widths) {
      if (!(samples && radii && neighbors && widths))
        throw ParseError("config: samples/radii/neighbors/widths must be given together");
      const auto sv = to_u64s(*samples, "model.samples");
      const auto rv = to_doubles(*radii, "model.radii");
      const auto kv2 = to_u64s(*neighbors, "model.neighbors");
      const auto wv = to_u64s(*widths, "model.widths");
      if (sv.size() != rv.size() || sv.size() != kv2.size() || sv.size() != wv.size())
        throw ParseError("config: level lists must have equal length");
      cfg.model.levels.clear();
      for (std::size_t i = 0; i < sv.size(); ++i)
        cfg.model.levels.push_back({static_cast<std::size_t>(sv[i]), rv[i],
                                    static_cast<std::size_t>(kv2[i]), static_cast<std::size_t>(wv[i])});
    }
    if (auto* v = r.get("head_width")) cfg.model.head_width = to_u64(*v, "model.head_width");
    if (auto* v = r.get("bottleneck")) cfg.model.bottleneck = to_u64(*v, "model.bottleneck");
    if (auto* v = r.get("group_size")) cfg.model.group_size = to_u64(*v, "model.group_size");
    if (auto* v = r.get("heads")) cfg.model.head_mode = head_mode_from_name(*v);
    if (auto* v = r.get("bn_relu_inside")) cfg.model.bn_relu_inside = to_bool(*v, "model.bn_relu_inside");
    if (auto* v = r.get("dropout")) cfg.model.dropout = to_double(*v, "model.dropout");
    r.finish();
  }
  {
    SectionReader r(kv.find("train"));
    if (auto* v = r.get("lr")) cfg.train.lr = to_double(*v, "train.lr");
    if (auto* v = r.get("beta1")) cfg.train.beta1 = to_double(*v, "train.beta1");
    if (auto* v = r.get("beta2")) cfg.train.beta2 = to_double(*v, "train.beta2");
    if (auto* v = r.get("eps")) cfg.train.eps = to_double(*v, "train.eps");
    if (auto* v = r.get("batch")) cfg.train.batch_size = to_u64(*v, "train.batch");
    if (auto* v = r.get("label_smoothing"))
      cfg.train.label_smoothing = to_double(*v, "train.label_smoothing");
    if (auto* v = r.get("aux_weights")) cfg.train.aux_weights = to_doubles(*v, "train.aux_weights");
    if (auto* v = r.get("epochs")) cfg.train.epochs = to_u64(*v, "train.epochs");
    r.finish();
  }
  {
    SectionReader r(kv.find("augment"));
    if (auto* v = r.get("enabled")) cfg.augment_enabled = to_bool(*v, "augment.enabled");
    if (auto* v = r.get("scale")) cfg.augment.scale = to_bool(*v, "augment.scale");
    if (auto* v = r.get("flip")) cfg.augment.flip = to_bool(*v, "augment.flip");
    if (auto* v = r.get("rotate")) cfg.augment.rotate = to_bool(*v, "augment.rotate");
    if (auto* v = r.get("jitter")) cfg.augment.jitter = to_bool(*v, "augment.jitter");
    if (auto* v = r.get("color_permute")) cfg.augment.color_permute = to_bool(*v, "augment.color_permute");
    if (auto* v = r.get("color_noise")) cfg.augment.color_noise = to_bool(*v, "augment.color_noise");
    r.finish();
  }
  {
    SectionReader r(kv.find("scene"));
    bool has_scene_section = kv.find("scene") != nullptr;
    if (auto* v = r.get("extent")) {
      const auto e = to_doubles(*v, "scene.extent");
      if (e.size() != 3) throw ParseError("config: scene.extent needs 3 values");
      cfg.scene.extent = {e[0], e[1], e[2]};
    }
    if (auto* v = r.get("noise_sigma")) cfg.scene.noise_sigma = to_double(*v, "scene.noise_sigma");
    if (auto* v = r.get("color_noise")) cfg.scene.color_noise = to_double(*v, "scene.color_noise");
    if (auto* v = r.get("wall_clearance"))
      cfg.scene.wall_clearance = to_double(*v, "scene.wall_clearance");
    if (auto* v = r.get("train_count")) cfg.synth_train_count = to_u64(*v, "scene.train_count");
    if (auto* v = r.get("test_count")) cfg.synth_test_count = to_u64(*v, "scene.test_count");
    r.finish();
    bool saw_class = false;
    std::vector<SceneClassSpec> classes;
    for (const auto& s : kv.sections) {
      if (s.name.rfind("class.", 0) != 0) continue;
      saw_class = true;
      SectionReader cr(&s);
      SceneClassSpec cls;
      cls.name = s.name.substr(6);
      if (auto* v = cr.get("kind")) {
        if (*v == "floor") cls.kind = SurfaceKind::Floor;
        else if (*v == "walls") cls.kind = SurfaceKind::Walls;
        else if (*v == "sphere") cls.kind = SurfaceKind::Sphere;
        else if (*v == "box") cls.kind = SurfaceKind::Box;
        else throw ParseError("config: unknown surface kind '" + *v + "'");
      }
      if (auto* v = cr.get("density")) cls.density = to_double(*v, "class.density");
      if (auto* v = cr.get("color")) {
        const auto c = to_doubles(*v, "class.color");
        if (c.size() != 3) throw ParseError("config: class color needs 3 values");
        cls.base_color = {c[0], c[1], c[2]};
      }
      if (auto* v = cr.get("size")) cls.size = to_double(*v, "class.size");
      cr.finish();
      classes.push_back(cls);
    }
    if (saw_class) cfg.scene.classes = classes;
    if (has_scene_section) cfg.scene.seed = cfg.seed;
  }
  return cfg;
}

inline KvFile RunConfig::to_kv() const {
  using namespace cfgdetail;
  KvFile kv;
  auto& run = kv.section("run");
  run.set("data", data_dir);
  run.set("checkpoint", checkpoint);
  run.set("out", out_dir);
  run.set("seed", std::to_string(seed));
  run.set("deterministic", deterministic ? "true" : "false");
  run.set("threads", std::to_string(threads));
  run.set("input_points", std::to_string(input_points));
  run.set("block_size", fmt(block_size));
  run.set("val_every", std::to_string(val_every));
  run.set("min_block_points", std::to_string(min_block_points));

  auto& mdl = kv.section("model");
  mdl.set("num_classes", std::to_string(model.num_classes));
  mdl.set("stem_width", std::to_string(model.stem_width));
  std::vector<std::size_t> samples, ks, widths;
  std::vector<double> radii;
  for (const auto& l : model.levels) {
    samples.push_back(l.sample_count);
    radii.push_back(l.radius);
    ks.push_back(l.k);
    widths.push_back(l.width);
  }
  mdl.set("samples", join_ints(samples));
  mdl.set("radii", join_doubles(radii));
  mdl.set("neighbors", join_ints(ks));
  mdl.set("widths", join_ints(widths));
  mdl.set("head_width", std::to_string(model.head_width));
  mdl.set("bottleneck", std::to_string(model.bottleneck));
  mdl.set("group_size", std::to_string(model.group_size));
  mdl.set("heads", head_mode_name(model.head_mode));
  mdl.set("bn_relu_inside", model.bn_relu_inside ? "true" : "false");
  mdl.set("dropout", fmt(model.dropout));

  auto& tr = kv.section("train");
  tr.set("lr", fmt(train.lr));
  tr.set("beta1", fmt(train.beta1));
  tr.set("beta2", fmt(train.beta2));
  tr.set("eps", fmt(train.eps));
  tr.set("batch", std::to_string(train.batch_size));
  tr.set("label_smoothing", fmt(train.label_smoothing));
  tr.set("aux_weights", join_doubles(train.aux_weights));
  tr.set("epochs", std::to_string(train.epochs));

  auto& aug = kv.section("augment");
  aug.set("enabled", augment_enabled ? "true" : "false");
  aug.set("scale", augment.scale ? "true" : "false");
  aug.set("flip", augment.flip ? "true" : "false");
  aug.set("rotate", augment.rotate ? "true" : "false");
  aug.set("jitter", augment.jitter ? "true" : "false");
  aug.set("color_permute", augment.color_permute ? "true" : "false");
  aug.set("color_noise", augment.color_noise ? "true" : "false");

  auto& sc = kv.section("scene");
  sc.set("extent", join_doubles({scene.extent[0], scene.extent[1], scene.extent[2]}));
  sc.set("noise_sigma", fmt(scene.noise_sigma));
  sc.set("color_noise", fmt(scene.color_noise));
  sc.set("wall_clearance", fmt(scene.wall_clearance));
  sc.set("train_count", std::to_string(synth_train_count));
  sc.set("test_count", std::to_string(synth_test_count));
  for (const auto& cls : scene.classes) {
    auto& cs = kv.section("class." + cls.name);
    switch (cls.kind) {
      case SurfaceKind::Floor: cs.set("kind", "floor"); break;
      case SurfaceKind::Walls: cs.set("kind", "walls"); break;
      case SurfaceKind::Sphere: cs.set("kind", "sphere"); break;
      case SurfaceKind::Box: cs.set("kind", "box"); break;
    }
    cs.set("density", fmt(cls.density));
    cs.set("color", join_doubles({cls.base_color[0], cls.base_color[1], cls.base_color[2]}));
    cs.set("size", fmt(cls.size));
  }
  return kv;
}

}  // namespace gelatto
