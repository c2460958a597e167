#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "parkpredict/nn/tensor.hpp"

namespace parkpredict::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in native little-endian order");

inline constexpr const char* kCheckpointFormat = "parkpredict-checkpoint";
inline constexpr int kCheckpointVersion = 1;

/// Files that make up one checkpoint: `<base>.json` (manifest) and `<base>.bin` (float32 blob).
inline std::filesystem::path checkpoint_manifest_path(const std::filesystem::path& base) {
  return std::filesystem::path(base.string() + ".json");
}
inline std::filesystem::path checkpoint_blob_path(const std::filesystem::path& base) {
  return std::filesystem::path(base.string() + ".bin");
}

template <typename T>
void save_checkpoint(const std::filesystem::path& base, const ParameterList<T>& params) {
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = kCheckpointVersion;
  manifest["dtype"] = "float32";
  manifest["byte_order"] = "little";
  manifest["blob"] = checkpoint_blob_path(base).filename().string();
  auto& entries = manifest["parameters"] = nlohmann::json::array();
  std::vector<float> blob;
  for (const auto* p : params) {
    entries.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"offset", blob.size()}});
    for (const T v : p->value.values()) blob.push_back(static_cast<float>(v));
  }
  manifest["count"] = blob.size();

  if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
  std::ofstream bin(checkpoint_blob_path(base), std::ios::binary | std::ios::trunc);
  bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!bin) throw std::runtime_error("save_checkpoint: cannot write " + checkpoint_blob_path(base).string());
  std::ofstream js(checkpoint_manifest_path(base), std::ios::trunc);
  js << manifest.dump(2) << '\n';
  if (!js) throw std::runtime_error("save_checkpoint: cannot write " + checkpoint_manifest_path(base).string());
}

/// Loads into existing parameters. Names, order and shapes must match exactly.
template <typename T>
void load_checkpoint(const std::filesystem::path& base, const ParameterList<T>& params) {
  std::ifstream js(checkpoint_manifest_path(base));
  if (!js) throw DataError("load_checkpoint: missing manifest " + checkpoint_manifest_path(base).string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("load_checkpoint: malformed manifest: ") + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) throw DataError("load_checkpoint: not a checkpoint manifest");
  const auto& entries = manifest.at("parameters");
  if (entries.size() != params.size())
    throw ShapeError("load_checkpoint: expected " + std::to_string(params.size()) + " parameters, found " +
                     std::to_string(entries.size()));
  const auto count = manifest.at("count").get<std::size_t>();
  std::vector<float> blob(count);
  std::ifstream bin(base.parent_path() / manifest.at("blob").get<std::string>(), std::ios::binary);
  if (!bin) throw DataError("load_checkpoint: missing blob for " + base.string());
  bin.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (bin.gcount() != static_cast<std::streamsize>(count * sizeof(float)) || bin.peek() != EOF)
    throw ShapeError("load_checkpoint: blob size does not match manifest");

  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto name = entries[i].at("name").get<std::string>();
    const auto shape = entries[i].at("shape").get<std::vector<std::size_t>>();
    const auto offset = entries[i].at("offset").get<std::size_t>();
    if (name != params[i]->name) throw ShapeError("load_checkpoint: parameter " + std::to_string(i) + " is '" + name + "', expected '" + params[i]->name + "'");
    if (shape != params[i]->value.shape()) throw ShapeError("load_checkpoint: shape mismatch for " + name);
    if (offset + params[i]->value.size() > blob.size()) throw ShapeError("load_checkpoint: blob too short for " + name);
    for (std::size_t k = 0; k < params[i]->value.size(); ++k) params[i]->value[k] = static_cast<T>(blob[offset + k]);
  }
}

}  // namespace parkpredict::nn
