// checkpoint.hpp - parameter group persistence: one raw little-endian
// float32 blob per group plus a JSON index {name, shape, offset}.
#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "privseg/nets.hpp"
#include "privseg/tape.hpp"

namespace privseg {

namespace detail {

inline void write_blob(const std::string& path, const std::vector<float>& blob) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(blob.data()),
          static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<float> read_blob(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  const auto bytes = static_cast<size_t>(f.tellg());
  if (bytes % sizeof(float) != 0)
    throw std::runtime_error("checkpoint not a float32 blob: " + path);
  f.seekg(0);
  std::vector<float> blob(bytes / sizeof(float));
  f.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));
  if (!f) throw std::runtime_error("read failed: " + path);
  return blob;
}

}  // namespace detail

// Named float32 arrays with an index sidecar. Offsets are in float units.
inline void save_arrays(const std::string& blob_path, const std::string& index_path,
                        const std::vector<std::pair<std::string, const Tensor<float>*>>& arrays) {
  std::vector<float> blob;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, t] : arrays) {
    index.push_back({{"name", name}, {"shape", t->shape()}, {"offset", blob.size()}});
    blob.insert(blob.end(), t->data(), t->data() + t->size());
  }
  detail::write_blob(blob_path, blob);
  std::ofstream f(index_path);
  if (!f) throw std::runtime_error("cannot open for write: " + index_path);
  f << index.dump(2) << "\n";
}

inline std::map<std::string, Tensor<float>> load_arrays(const std::string& blob_path,
                                                        const std::string& index_path) {
  std::ifstream jf(index_path);
  if (!jf) throw std::runtime_error("cannot open checkpoint index: " + index_path);
  const auto index = nlohmann::json::parse(jf);
  const auto blob = detail::read_blob(blob_path);
  std::map<std::string, Tensor<float>> out;
  for (const auto& e : index) {
    const auto name = e.at("name").get<std::string>();
    Tensor<float> t(e.at("shape").get<Shape>());
    const auto off = e.at("offset").get<size_t>();
    if (off + static_cast<size_t>(t.size()) > blob.size())
      throw std::runtime_error("checkpoint index overruns blob: " + name);
    std::memcpy(t.data(), blob.data() + off, static_cast<size_t>(t.size()) * sizeof(float));
    out.emplace(name, std::move(t));
  }
  return out;
}

template <typename T>
void save_param_group(const std::string& dir, const std::string& group,
                      const std::vector<Param<T>*>& params) {
  std::vector<Tensor<float>> casted;
  casted.reserve(params.size());
  std::vector<std::pair<std::string, const Tensor<float>*>> arrays;
  for (auto* p : params) casted.push_back(p->value.template cast<float>());
  for (size_t i = 0; i < params.size(); ++i) arrays.emplace_back(params[i]->name, &casted[i]);
  save_arrays(dir + "/" + group + ".bin", dir + "/" + group + ".json", arrays);
}

template <typename T>
void load_param_group(const std::string& dir, const std::string& group,
                      const std::vector<Param<T>*>& params) {
  auto arrays = load_arrays(dir + "/" + group + ".bin", dir + "/" + group + ".json");
  for (auto* p : params) {
    auto it = arrays.find(p->name);
    if (it == arrays.end())
      throw std::runtime_error("checkpoint missing parameter " + p->name + " in group " + group);
    if (it->second.shape() != p->value.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + p->name + ": " +
                               shape_str(it->second.shape()) + " vs " +
                               shape_str(p->value.shape()));
    p->value = it->second.template cast<T>();
  }
}

inline nlohmann::json network_config_to_json(const NetworkConfig& c) {
  return {{"enc_channels", c.enc_channels}, {"unet_depth", c.unet_depth},
          {"base_width", c.base_width},     {"dense_blocks", c.dense_blocks},
          {"growth", c.growth},             {"embed_dim", c.embed_dim},
          {"head_hidden", c.head_hidden},   {"num_classes", c.num_classes}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  c.enc_channels = j.value("enc_channels", c.enc_channels);
  c.unet_depth = j.value("unet_depth", c.unet_depth);
  c.base_width = j.value("base_width", c.base_width);
  c.dense_blocks = j.value("dense_blocks", c.dense_blocks);
  c.growth = j.value("growth", c.growth);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.validate();
  return c;
}

// Whole-system checkpoint: three groups plus the architecture config.
template <typename T>
void save_system(const std::string& dir, SegSystem<T>& sys) {
  for (const char* g : {"G", "S", "D"}) save_param_group<T>(dir, g, sys.group(g));
  std::ofstream f(dir + "/network.json");
  if (!f) throw std::runtime_error("cannot open for write: " + dir + "/network.json");
  f << network_config_to_json(sys.cfg).dump(2) << "\n";
}

template <typename T>
SegSystem<T> load_system(const std::string& dir) {
  std::ifstream f(dir + "/network.json");
  if (!f) throw std::runtime_error("cannot open checkpoint: " + dir + "/network.json");
  const auto cfg = network_config_from_json(nlohmann::json::parse(f));
  SegSystem<T> sys(cfg, /*seed=*/0);
  for (const char* g : {"G", "S", "D"}) load_param_group<T>(dir, g, sys.group(g));
  return sys;
}

}  // namespace privseg
