#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "stpark/config.hpp"
#include "stpark/data.hpp"
#include "stpark/train.hpp"

namespace stpark {

/// Synthetic data in the shape the CSV loaders produce.
RawDataset to_raw_dataset(const SynthData& synth);
RawDataset load_run_data(const DataConfig& data);

/// The model config with data-derived fields (lot count, vocabularies) set.
ModelConfig resolve_model_config(ModelConfig model, const PreparedData& data);

struct TrainOutcome {
  std::size_t param_count = 0;
  TrainState state;
  MetricsReport test;
};

/// Trains per `config`, appending one JSON line per epoch to the log and
/// writing the best parameters with the resumable state to the checkpoint.
TrainOutcome cmd_train(const RunConfig& config, std::ostream& out);
/// Prints the test-split report as a table, then as JSON.
MetricsReport cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                       std::ostream& out);
/// Writes a JSON array of forecast payloads, one per lot (all lots when empty).
void cmd_predict(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                 const std::vector<std::string>& lots, std::ostream& out);
void cmd_synth(std::size_t lots, std::size_t days, std::uint64_t seed, const std::filesystem::path& out_dir);

struct MixerTiming {
  std::string variant;  // "gco" or "msa"
  std::size_t lots = 0;
  std::size_t hidden = 0;
  double forward_seconds = 0.0;
  double backward_seconds = 0.0;

  double total() const { return forward_seconds + backward_seconds; }
  std::string to_json() const;
};

/// Best-of-`repeats` wall time of one spatial mixing step, forward and
/// backward, on (1, lots + 1, hidden): the GCO block or dense node attention.
MixerTiming time_spatial_mixer(const std::string& variant, std::size_t lots, std::size_t hidden = 64,
                               std::size_t repeats = 3);
/// Sizes benchmarked by the bench command.
inline const std::vector<std::size_t> kBenchLots = {256, 512, 1024, 1687};
void cmd_bench(const std::string& variant, const std::vector<std::size_t>& lots, std::ostream& out);

/// One-line JSON error report: {"error": kind, "message": text}.
std::string error_line(const std::exception& e);
std::string error_line(const std::string& kind, const std::string& message);

}  // namespace stpark
