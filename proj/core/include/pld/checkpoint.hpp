#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "pld/model.hpp"

namespace pld {

// On-disk layout of a checkpoint directory:
//   manifest.json  model config, dtype, and one {name, shape, offset, bytes}
//                  entry per parameter, plus free-form "extra" metadata
//   weights.bin    every parameter back to back as little-endian IEEE floats
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kWeightsFile = "weights.bin";

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ModelWeights<T>& weights,
                     const nlohmann::json& extra = nlohmann::json::object());

// Throws ConfigError on missing files, dtype mismatch, or a manifest that does
// not match the parameter set implied by its model config.
template <typename T>
ModelWeights<T> load_checkpoint(const std::filesystem::path& dir, nlohmann::json* extra = nullptr);

nlohmann::json read_manifest(const std::filesystem::path& dir);

}  // namespace pld
