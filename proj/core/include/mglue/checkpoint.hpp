#pragma once

// Single-file checkpoint: an 8-byte magic, the manifest length as a
// little-endian u64, the JSON manifest, then every tensor as contiguous
// little-endian float64 values.

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "mglue/graph_data.hpp"
#include "mglue/pretrain.hpp"

namespace mglue {

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "MGCKPT01";

/// Unreadable or inconsistent checkpoint; `position` is the file offset at
/// which the problem was detected.
class CheckpointError : public DataError {
 public:
  CheckpointError(const std::string& what, std::size_t position)
      : DataError(what + " (byte " + std::to_string(position) + ")"), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

struct Checkpoint {
  nlohmann::json manifest;  // format_version, config, config_hash, epoch, tensors, ...
  TrainState state;
  const nlohmann::json& config() const { return manifest.at("config"); }
};

std::string encode_checkpoint(const TrainState& state, const nlohmann::json& config);
Checkpoint decode_checkpoint(std::string_view bytes);

/// Writes to a temporary file in the same directory, then renames it over
/// `path`.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const nlohmann::json& config);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mglue
