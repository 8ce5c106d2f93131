#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aimkp/model.hpp"
#include "json.hpp"

namespace aimkp {

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Checkpoint container: magic + version, a JSON header carrying the model
// config and layout digest, then the raw little-endian parameter vector.
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

// FNV-1a over the raw parameter bytes; used by manifests and rerun tests.
uint64_t param_digest(const ModelParams& params);

// Whole-file read/write. write_file_atomic stages to "<path>.tmp" and renames.
std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& content);

uint64_t file_digest(const std::string& path);

// Fixed numeric formatting shared by every CSV writer so that re-derived
// tables are byte-comparable.
std::string format_double(double v);

} // namespace aimkp
