#pragma once

#include <string>

#include "bf/encoder.hpp"

#include <nlohmann/json_fwd.hpp>

namespace bf {

// On-disk model: plain key=value text header (format version, config, pruned
// flag) followed by named flat arrays of little-endian 64-bit floats, names
// length-prefixed. Round trips are bit-exact.
inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  EncoderConfig config;
  EncoderParams params;
};

void save_checkpoint(const std::string& path, const EncoderConfig& config, EncoderParams& params);
Checkpoint load_checkpoint(const std::string& path);

// Flat JSON with exactly the EncoderConfig fields; unknown keys rejected.
EncoderConfig encoder_config_from_json(const nlohmann::json& j);
nlohmann::json encoder_config_to_json(const EncoderConfig& cfg);
EncoderConfig load_encoder_config(const std::string& path);

}  // namespace bf
