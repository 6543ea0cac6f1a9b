#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rlens/model.hpp"

namespace rlens {

/// On-disk container: a directory holding `manifest.json` (UTF-8) and
/// `weights.bin` (concatenated little-endian f32, row-major, at the byte
/// offsets the manifest declares). Used for checkpoints and for steering
/// sidecars alike.

struct LoadedContainer {
  std::map<std::string, Tensor> tensors;
  std::string manifest_json;  // raw manifest text, for callers that need extras
};

/// Writes tensors in the given order, packing the blob densely. Extra
/// manifest fields (already-serialized JSON object members) are spliced in.
void save_container(const std::filesystem::path& dir,
                    const std::vector<std::pair<std::string, Tensor>>& tensors,
                    const std::string& provenance,
                    const std::string& extra_manifest_json = "");

LoadedContainer load_container(const std::filesystem::path& dir);

WeightStore load_weights(const std::filesystem::path& dir);
void save_weights(const WeightStore& store, const std::filesystem::path& dir);

/// FNV-1a digest of manifest + blob bytes, as 16 hex chars.
std::string container_digest(const std::filesystem::path& dir);

}  // namespace rlens
