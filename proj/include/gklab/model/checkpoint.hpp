#pragma once

#include <filesystem>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "gklab/model/transformer.hpp"

namespace gklab::model {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::ordered_json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

/// Binary checkpoint: 8-byte magic, u32 version, u64 header length, JSON header
/// (config, tensor names and shapes, caller metadata), then little-endian f64 data.
void save_checkpoint(const std::filesystem::path& path, const Parameters& params,
                     const nlohmann::ordered_json& metadata = nlohmann::ordered_json::object());

struct LoadedCheckpoint {
  Parameters params;
  nlohmann::json metadata;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gklab::model
