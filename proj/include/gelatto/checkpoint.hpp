#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gelatto/network.hpp"

namespace gelatto {

// Checkpoint layout, versioned and self-describing:
//   line   "gelatto-checkpoint v1"
//   line   "json <nbytes>"   followed by that many bytes of JSON metadata
//   line   "blob <ndoubles>" followed by raw f64 little-endian data
// The JSON carries the model config and a tensor manifest (name, shape,
// offset into the blob); parameters, BN running stats and Adam moments all
// live in the same manifest under distinct name prefixes.

namespace ckptdetail {

using nlohmann::json;

inline json model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["num_classes"] = cfg.num_classes;
  j["stem_width"] = cfg.stem_width;
  j["head_width"] = cfg.head_width;
  j["bottleneck"] = cfg.bottleneck;
  j["group_size"] = cfg.group_size;
  j["heads"] = head_mode_name(cfg.head_mode);
  j["bn_relu_inside"] = cfg.bn_relu_inside;
  j["dropout"] = cfg.dropout;
  j["levels"] = json::array();
  for (const auto& l : cfg.levels)
    j["levels"].push_back({{"samples", l.sample_count},
                           {"radius", l.radius},
                           {"neighbors", l.k},
                           {"width", l.width}});
  return j;
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.num_classes = j.at("num_classes").get<std::size_t>();
  cfg.stem_width = j.at("stem_width").get<std::size_t>();
  cfg.head_width = j.at("head_width").get<std::size_t>();
  cfg.bottleneck = j.at("bottleneck").get<std::size_t>();
  cfg.group_size = j.at("group_size").get<std::size_t>();
  cfg.head_mode = head_mode_from_name(j.at("heads").get<std::string>());
  cfg.bn_relu_inside = j.at("bn_relu_inside").get<bool>();
  cfg.dropout = j.at("dropout").get<double>();
  for (const auto& l : j.at("levels"))
    cfg.levels.push_back({l.at("samples").get<std::size_t>(), l.at("radius").get<double>(),
                          l.at("neighbors").get<std::size_t>(), l.at("width").get<std::size_t>()});
  return cfg;
}

}  // namespace ckptdetail

inline void save_checkpoint(const std::string& path, SegModel& model,
                            const AdamState* adam = nullptr) {
  using ckptdetail::json;
  json meta;
  meta["config"] = ckptdetail::model_config_to_json(model.cfg);
  meta["tensors"] = json::array();
  std::vector<double> blob;

  auto append = [&](const std::string& name, const Tensor& t) {
    meta["tensors"].push_back(
        {{"name", name}, {"shape", t.shape()}, {"offset", blob.size()}, {"size", t.size()}});
    blob.insert(blob.end(), t.cdata(), t.cdata() + t.size());
  };
  model.visit_params([&](const std::string& name, Tensor& t) { append("param." + name, t); });
  model.visit_state([&](const std::string& name, Tensor& t) { append("state." + name, t); });
  if (adam) {
    meta["adam_t"] = adam->t;
    model.visit_params([&](const std::string& name, Tensor& t) {
      auto it = adam->slots.find(name);
      if (it == adam->slots.end()) return;
      meta["tensors"].push_back({{"name", "adam.m." + name},
                                 {"shape", json::array({it->second.m.size()})},
                                 {"offset", blob.size()},
                                 {"size", it->second.m.size()}});
      blob.insert(blob.end(), it->second.m.begin(), it->second.m.end());
      meta["tensors"].push_back({{"name", "adam.v." + name},
                                 {"shape", json::array({it->second.v.size()})},
                                 {"offset", blob.size()},
                                 {"size", it->second.v.size()}});
      blob.insert(blob.end(), it->second.v.begin(), it->second.v.end());
    });
  }

  const std::string meta_str = meta.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open checkpoint '" + path + "' for writing");
  out << "gelatto-checkpoint v1\n";
  out << "json " << meta_str.size() << "\n" << meta_str;
  out << "blob " << blob.size() << "\n";
  out.write(reinterpret_cast<const char*>(blob.data()), blob.size() * 8);
}

struct LoadedCheckpoint {
  SegModel model;
  AdamState adam;
  bool has_adam = false;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path, std::uint64_t init_seed = 0) {
  using ckptdetail::json;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint '" + path + "'");
  std::string header;
  std::getline(in, header);
  if (header != "gelatto-checkpoint v1")
    throw ParseError(path + ": not a gelatto checkpoint (header '" + header + "')");
  std::string tag;
  std::size_t n = 0;
  in >> tag >> n;
  in.get();  // newline
  if (tag != "json") throw ParseError(path + ": missing json block");
  std::string meta_str(n, '\0');
  in.read(meta_str.data(), n);
  json meta = json::parse(meta_str);
  in >> tag >> n;
  in.get();
  if (tag != "blob") throw ParseError(path + ": missing blob block");
  std::vector<double> blob(n);
  in.read(reinterpret_cast<char*>(blob.data()), n * 8);
  if (!in) throw ParseError(path + ": truncated blob");

  LoadedCheckpoint out{SegModel::make(ckptdetail::model_config_from_json(meta.at("config")),
                                      init_seed),
                       {},
                       false};

  std::map<std::string, std::pair<std::size_t, std::size_t>> manifest;  // name -> offset,size
  for (const auto& t : meta.at("tensors"))
    manifest[t.at("name").get<std::string>()] = {t.at("offset").get<std::size_t>(),
                                                 t.at("size").get<std::size_t>()};

  auto restore = [&](const std::string& name, Tensor& t) {
    auto it = manifest.find(name);
    if (it == manifest.end()) throw ParseError(path + ": checkpoint missing tensor '" + name + "'");
    if (it->second.second != t.size())
      throw ParseError(path + ": size mismatch for '" + name + "'");
    std::copy_n(blob.data() + it->second.first, t.size(), t.data());
  };
  out.model.visit_params([&](const std::string& name, Tensor& t) { restore("param." + name, t); });
  out.model.visit_state([&](const std::string& name, Tensor& t) { restore("state." + name, t); });

  if (meta.contains("adam_t")) {
    out.has_adam = true;
    out.adam.t = meta.at("adam_t").get<std::uint64_t>();
    out.model.visit_params([&](const std::string& name, Tensor& t) {
      auto mi = manifest.find("adam.m." + name);
      auto vi = manifest.find("adam.v." + name);
      if (mi == manifest.end() || vi == manifest.end()) return;
      AdamState::Slot slot;
      slot.m.assign(blob.begin() + mi->second.first, blob.begin() + mi->second.first + mi->second.second);
      slot.v.assign(blob.begin() + vi->second.first, blob.begin() + vi->second.first + vi->second.second);
      out.adam.slots[name] = std::move(slot);
    });
  }
  return out;
}

}  // namespace gelatto
