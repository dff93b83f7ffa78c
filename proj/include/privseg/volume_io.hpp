// volume_io.hpp - persistence: raw little-endian arrays with JSON sidecars,
// and the manifest file.
#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "privseg/dataset.hpp"
#include "privseg/volume.hpp"

namespace privseg {

namespace detail {

inline void write_file(const std::string& path, const char* data, size_t bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write(data, static_cast<std::streamsize>(bytes));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open: " + path);
  const auto bytes = f.tellg();
  f.seekg(0);
  std::vector<char> buf(static_cast<size_t>(bytes));
  f.read(buf.data(), bytes);
  if (!f) throw std::runtime_error("read failed: " + path);
  return buf;
}

inline std::string sidecar_path(const std::string& path) { return path + ".json"; }

}  // namespace detail

inline void save_volume(const std::string& path, const Volume& v) {
  v.validate();
  detail::write_file(path, reinterpret_cast<const char*>(v.voxels.data()),
                     static_cast<size_t>(v.voxels.size()) * sizeof(float));
  nlohmann::json side;
  side["shape"] = v.voxels.shape();
  side["spacing_mm"] = v.spacing_mm;
  side["dtype"] = "float32";
  std::ofstream f(detail::sidecar_path(path));
  f << side.dump(2) << "\n";
}

inline Volume load_volume(const std::string& path) {
  const auto side = nlohmann::json::parse(detail::read_file(detail::sidecar_path(path)));
  Shape shape = side.at("shape").get<Shape>();
  Volume v;
  v.voxels = Tensor<float>(shape);
  if (side.contains("spacing_mm")) v.spacing_mm = side.at("spacing_mm").get<std::array<double, 3>>();
  const auto raw = detail::read_file(path);
  if (raw.size() != static_cast<size_t>(v.voxels.size()) * sizeof(float))
    throw std::runtime_error("volume payload size mismatch: " + path);
  std::memcpy(v.voxels.data(), raw.data(), raw.size());
  v.validate();
  return v;
}

inline void save_labels(const std::string& path, const LabelMap& m) {
  m.validate();
  detail::write_file(path, reinterpret_cast<const char*>(m.labels.data()),
                     static_cast<size_t>(m.labels.size()));
  nlohmann::json side;
  side["shape"] = m.labels.shape();
  side["num_classes"] = m.num_classes;
  side["dtype"] = "uint8";
  std::ofstream f(detail::sidecar_path(path));
  f << side.dump(2) << "\n";
}

inline LabelMap load_labels(const std::string& path) {
  const auto side = nlohmann::json::parse(detail::read_file(detail::sidecar_path(path)));
  LabelMap m;
  m.labels = Tensor<uint8_t>(side.at("shape").get<Shape>());
  m.num_classes = side.at("num_classes").get<int>();
  const auto raw = detail::read_file(path);
  if (raw.size() != static_cast<size_t>(m.labels.size()))
    throw std::runtime_error("labels payload size mismatch: " + path);
  std::memcpy(m.labels.data(), raw.data(), raw.size());
  m.validate();
  return m;
}

inline void save_manifest(const std::string& path, const Manifest& m) {
  m.validate();
  nlohmann::json j;
  j["records"] = nlohmann::json::array();
  nlohmann::json split = nlohmann::json::object();
  for (size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    j["records"].push_back({{"subject_id", r.subject_id},
                            {"session_id", r.session_id},
                            {"volume_path", r.volume_path},
                            {"labels_path", r.labels_path}});
    split[r.subject_id + "/" + r.session_id] = split_name(m.split[i]);
  }
  j["split"] = split;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << j.dump(2) << "\n";
}

inline Manifest load_manifest(const std::string& path) {
  const auto j = nlohmann::json::parse(detail::read_file(path));
  Manifest m;
  for (const auto& rj : j.at("records")) {
    SubjectRecord r;
    r.subject_id = rj.at("subject_id").get<std::string>();
    r.session_id = rj.at("session_id").get<std::string>();
    r.volume_path = rj.at("volume_path").get<std::string>();
    r.labels_path = rj.at("labels_path").get<std::string>();
    m.records.push_back(std::move(r));
  }
  for (const auto& r : m.records) {
    const auto key = r.subject_id + "/" + r.session_id;
    m.split.push_back(split_from_name(j.at("split").at(key).get<std::string>()));
  }
  m.validate();
  return m;
}

}  // namespace privseg
