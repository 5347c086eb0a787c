#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stpark/data.hpp"
#include "stpark/model.hpp"
#include "stpark/train.hpp"

namespace stpark {

inline constexpr int kCheckpointFormatVersion = 1;

/// A trained model with what inference needs to rebuild its inputs.
///
/// On disk: a magic line, a one-line JSON header (config, statistics, keys,
/// shapes, offsets, SHA-256 of the payload) and a raw little-endian f64
/// payload.
struct Checkpoint {
  int format_version = kCheckpointFormatVersion;
  ModelConfig config;
  std::vector<std::string> lot_ids;
  NormStats stats;
  WeatherStats weather;
  ModelParams params;
  /// Optimizer and early-stopping state, for resuming.
  std::optional<TrainState> train_state;
  /// Hex SHA-256 of the payload; filled by serialize and parse.
  std::string digest;
};

std::string sha256_hex(std::string_view bytes);

std::string serialize_checkpoint(Checkpoint& checkpoint);
/// Throws CheckpointError on a bad magic line, unsupported version, truncated
/// payload, digest mismatch or inconsistent header.
Checkpoint parse_checkpoint(std::string_view bytes);

/// Writes to a temporary file beside `path` and renames it into place, so a
/// failure never leaves a partial checkpoint.
void save_checkpoint(const std::filesystem::path& path, Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes `contents` to `path` through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace stpark
