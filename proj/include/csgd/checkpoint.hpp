#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "csgd/errors.hpp"
#include "csgd/model.hpp"
#include "csgd/network_spec.hpp"

namespace csgd {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBlobFile = "tensors.bin";

namespace detail {

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw IoError("failed writing '" + p.string() + "'");
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

}  // namespace detail

/// Writes `dir`/manifest.json and `dir`/tensors.bin. The blob is every tensor
/// of `model.named_tensors()` as little-endian float32, back to back.
inline void save_checkpoint(const std::string& dir, const Model& model, const nlohmann::json& metadata = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "csgd-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["spec"] = model.spec();
  manifest["blob"] = kBlobFile;
  nlohmann::json created = metadata.is_object() ? metadata : nlohmann::json::object();
  created["time"] = detail::utc_now();
  manifest["created"] = created;
  manifest["tensors"] = nlohmann::json::array();
  std::vector<std::uint32_t> blob;
  for (const auto& nt : model.named_tensors()) {
    const std::size_t offset = blob.size() * 4;
    for (float v : nt.tensor.data()) blob.push_back(detail::to_little(std::bit_cast<std::uint32_t>(v)));
    manifest["tensors"].push_back({{"name", nt.name},
                                   {"shape", nt.tensor.shape()},
                                   {"dtype", "f32le"},
                                   {"offset", offset},
                                   {"length", nt.tensor.numel() * 4}});
  }
  std::ofstream out(fs::path(dir) / kBlobFile, std::ios::binary);
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * 4));
  if (!out) throw IoError("failed writing '" + (fs::path(dir) / kBlobFile).string() + "'");
  detail::write_file(fs::path(dir) / kManifestFile, manifest.dump(2) + "\n");
}

inline nlohmann::json read_manifest(const std::string& dir) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_file(std::filesystem::path(dir) / kManifestFile));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint '" + dir + "': malformed manifest: " + e.what());
  }
  if (m.value("format", "") != "csgd-checkpoint") throw IoError("checkpoint '" + dir + "': not a csgd checkpoint");
  const int version = m.value("version", -1);
  if (version != kCheckpointVersion)
    throw IoError("checkpoint '" + dir + "': format version " + std::to_string(version) + ", this build reads version " +
                  std::to_string(kCheckpointVersion));
  return m;
}

/// Fills an existing model's tensors from a checkpoint. Every tensor of the
/// model must be present with the same shape.
inline void load_checkpoint_into(const std::string& dir, Model& model) {
  namespace fs = std::filesystem;
  const nlohmann::json m = read_manifest(dir);
  const std::string blob_text = detail::read_file(fs::path(dir) / m.value("blob", std::string(kBlobFile)));
  const std::size_t blob_len = blob_text.size();

  struct Entry {
    Shape shape;
    std::size_t offset, length;
  };
  std::map<std::string, Entry> entries;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (const auto& t : m.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    if (t.value("dtype", "") != "f32le") throw IoError("checkpoint '" + dir + "': tensor '" + name + "' has unsupported dtype");
    Entry e{t.at("shape").get<Shape>(), t.at("offset").get<std::size_t>(), t.at("length").get<std::size_t>()};
    if (e.length != shape_numel(e.shape) * 4)
      throw IoError("checkpoint '" + dir + "': tensor '" + name + "' length " + std::to_string(e.length) +
                    " does not match shape " + shape_str(e.shape));
    if (e.offset % 4 != 0 || e.offset > blob_len || e.length > blob_len - e.offset)
      throw IoError("checkpoint '" + dir + "': tensor '" + name + "' range [" + std::to_string(e.offset) + ", " +
                    std::to_string(e.offset + e.length) + ") lies outside the " + std::to_string(blob_len) + "-byte blob");
    ranges.push_back({e.offset, e.offset + e.length});
    entries[name] = e;
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i)
    if (ranges[i].first < ranges[i - 1].second)
      throw IoError("checkpoint '" + dir + "': tensor ranges overlap at byte offset " + std::to_string(ranges[i].first));

  for (auto& nt : model.named_tensors()) {
    auto it = entries.find(nt.name);
    if (it == entries.end()) throw IoError("checkpoint '" + dir + "': missing tensor '" + nt.name + "'");
    if (it->second.shape != nt.tensor.shape())
      throw ShapeError("checkpoint tensor '" + nt.name + "' has shape " + shape_str(it->second.shape) +
                       ", model expects " + shape_str(nt.tensor.shape()));
    Tensor t = nt.tensor;
    const char* src = blob_text.data() + it->second.offset;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      std::uint32_t u;
      std::memcpy(&u, src + 4 * i, 4);
      t.ptr()[i] = std::bit_cast<float>(detail::to_little(u));
    }
  }
}

/// Rebuilds the model described by the manifest and loads its tensors.
inline Model load_checkpoint(const std::string& dir) {
  const nlohmann::json m = read_manifest(dir);
  NetworkSpec spec;
  try {
    spec = m.at("spec").get<NetworkSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint '" + dir + "': bad spec: " + e.what());
  }
  Model model = build_model(spec, 0);
  load_checkpoint_into(dir, model);
  return model;
}

}  // namespace csgd
