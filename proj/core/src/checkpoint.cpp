#include "pld/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "pld/config.hpp"
#include "pld/errors.hpp"

namespace pld {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

template <typename T>
void to_little_endian(std::span<const T> src, std::vector<char>& dst) {
  const std::size_t offset = dst.size();
  dst.resize(offset + src.size_bytes());
  std::memcpy(dst.data() + offset, src.data(), src.size_bytes());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = offset; i < dst.size(); i += sizeof(T)) std::reverse(dst.begin() + i, dst.begin() + i + sizeof(T));
  }
}

}  // namespace

template <typename T>
void save_checkpoint(const fs::path& dir, const ModelWeights<T>& weights, const json& extra) {
  fs::create_directories(dir);
  json tensors = json::array();
  std::vector<char> bytes;
  for (const auto& p : weights.parameters()) {
    const std::size_t offset = bytes.size();
    to_little_endian<T>(p.tensor.data(), bytes);
    tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset},
                       {"bytes", bytes.size() - offset}});
  }
  json manifest{{"format", "pld-checkpoint"},
                {"version", 1},
                {"dtype", dtype_name<T>()},
                {"byte_order", "little"},
                {"data_file", kWeightsFile},
                {"total_bytes", bytes.size()},
                {"model", to_json(weights.config)},
                {"tensors", tensors},
                {"extra", extra}};

  // Write both files under temporary names, then rename, so an interrupted
  // save never clobbers the previous checkpoint.
  const fs::path tmp_weights = dir / (std::string(kWeightsFile) + ".tmp");
  const fs::path tmp_manifest = dir / (std::string(kManifestFile) + ".tmp");
  {
    std::ofstream out(tmp_weights, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + tmp_weights.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  write_json(tmp_manifest, manifest);
  fs::rename(tmp_weights, dir / kWeightsFile);
  fs::rename(tmp_manifest, dir / kManifestFile);
}

json read_manifest(const fs::path& dir) {
  std::ifstream in(dir / kManifestFile);
  if (!in) throw ConfigError("no checkpoint manifest in " + dir.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("corrupt checkpoint manifest in " + dir.string() + ": " + e.what());
  }
}

template <typename T>
ModelWeights<T> load_checkpoint(const fs::path& dir, json* extra) {
  const json manifest = read_manifest(dir);
  if (manifest.value("format", "") != "pld-checkpoint") throw ConfigError("not a pld checkpoint: " + dir.string());
  if (manifest.value("dtype", "") != dtype_name<T>()) {
    throw ConfigError("checkpoint dtype " + manifest.value("dtype", std::string("?")) + " does not match " +
                      dtype_name<T>());
  }
  const ModelConfig config = model_config_from_json(manifest.at("model"));
  auto weights = ModelWeights<T>::initialize(config, 0);

  std::ifstream in(dir / manifest.value("data_file", std::string(kWeightsFile)), std::ios::binary);
  if (!in) throw ConfigError("missing checkpoint data file in " + dir.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != manifest.at("total_bytes").get<std::size_t>()) {
    throw ConfigError("checkpoint data file size does not match manifest in " + dir.string());
  }

  auto params = weights.parameters();
  const auto& entries = manifest.at("tensors");
  if (entries.size() != params.size()) {
    throw ConfigError("checkpoint lists " + std::to_string(entries.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    auto& p = params[i];
    if (e.at("name").get<std::string>() != p.name || e.at("shape").get<Shape>() != p.tensor.shape()) {
      throw ConfigError("checkpoint tensor " + e.at("name").get<std::string>() + " does not match parameter " +
                        p.name + " " + shape_string(p.tensor.shape()));
    }
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t nbytes = e.at("bytes").get<std::size_t>();
    if (nbytes != p.tensor.numel() * sizeof(T) || offset + nbytes > bytes.size()) {
      throw ConfigError("checkpoint tensor " + p.name + " has an inconsistent byte range");
    }
    char* dst = reinterpret_cast<char*>(p.tensor.data().data());
    std::memcpy(dst, bytes.data() + offset, nbytes);
    if constexpr (std::endian::native == std::endian::big) {
      for (std::size_t b = 0; b < nbytes; b += sizeof(T)) std::reverse(dst + b, dst + b + sizeof(T));
    }
  }
  if (extra) *extra = manifest.value("extra", json::object());
  return weights;
}

template void save_checkpoint<float>(const fs::path&, const ModelWeights<float>&, const json&);
template void save_checkpoint<double>(const fs::path&, const ModelWeights<double>&, const json&);
template ModelWeights<float> load_checkpoint<float>(const fs::path&, json*);
template ModelWeights<double> load_checkpoint<double>(const fs::path&, json*);

}  // namespace pld
