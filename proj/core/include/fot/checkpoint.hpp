#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "fot/tensor.hpp"

namespace fot {

// Self-describing parameter archive: magic, JSON header (kind, architecture
// metadata, config hash, tensor table), then raw little-endian doubles.
struct Checkpoint {
  std::string kind;
  std::string config_hash;
  std::string meta_json;  // architecture metadata, serialized
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const std::string& kind,
                     const std::string& meta_json, const std::string& config_hash,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors);

Checkpoint load_checkpoint(const std::filesystem::path& path);

// Convenience: reads just the header and returns the stored config hash.
std::string checkpoint_config_hash(const std::filesystem::path& path);

}  // namespace fot
