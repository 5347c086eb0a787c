#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "stpark/data.hpp"
#include "stpark/model.hpp"
#include "stpark/train.hpp"

namespace stpark {

struct SynthSpec {
  std::size_t lots = 20;
  std::size_t days = 30;
  std::uint64_t seed = 7;
};

struct DataConfig {
  /// Directory with pa.csv, lots.csv and optionally weather.csv.
  std::string dir;
  /// Generates the data in memory instead of reading `dir`.
  std::optional<SynthSpec> synth;
  FilterOptions filter;
};

struct OutputConfig {
  std::string checkpoint = "stpark.ckpt";
  std::string log = "train_log.jsonl";
};

/// The `train` command's document: {"data": {...}, "model": {...},
/// "train": {...}}. Output paths live in the train section.
struct RunConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  OutputConfig output;
};

/// Throws DataError on malformed JSON, unknown keys or wrong value types.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::string& path);
/// Replaces train.seed with STPARK_SEED when that variable is set.
void apply_env_overrides(RunConfig& config);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(std::string_view json_text);

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation activation);

}  // namespace stpark
