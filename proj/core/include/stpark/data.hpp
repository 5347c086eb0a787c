#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stpark/model.hpp"
#include "stpark/tensor.hpp"

namespace stpark {

inline constexpr std::int64_t kSlotSeconds = 900;
inline constexpr std::size_t kSlotsPerDay = 96;
/// sin/cos time of day, sin/cos day of week, weekend flag, three weather channels.
inline constexpr std::size_t kTemporalFeatures = 8;

/// Seconds since the Unix epoch (UTC) and the offset the text carried.
struct Timestamp {
  std::int64_t epoch = 0;
  int offset_minutes = 0;
};

/// Accepts YYYY-MM-DDTHH:MM:SS[.fff](Z|+HH:MM|-HH:MM|+HHMM). Throws DataError.
Timestamp parse_iso8601(std::string_view text);
std::string format_iso8601(std::int64_t epoch, int offset_minutes);

struct LotRecord {
  std::string lot_id;
  double latitude = 0.0;
  double longitude = 0.0;
  std::size_t planning_area = 0;
  std::size_t land_use = 0;
  double road_density = 0.0;
};

/// Availability on a regular 15-minute grid. values/observed are (steps, lots)
/// row-major; unobserved cells hold 0 until imputed.
struct SeriesFrame {
  std::vector<std::int64_t> timestamps;
  int offset_minutes = 0;
  std::vector<std::string> lot_ids;
  std::vector<double> values;
  std::vector<std::uint8_t> observed;
  /// Rows that replaced an earlier reading for the same (slot, lot).
  std::size_t duplicate_rows = 0;

  std::size_t steps() const { return timestamps.size(); }
  std::size_t lots() const { return lot_ids.size(); }
  double value(std::size_t t, std::size_t n) const { return values[t * lots() + n]; }
  bool is_observed(std::size_t t, std::size_t n) const { return observed[t * lots() + n] != 0; }
  double missing_rate(std::size_t n) const;
  /// Throws DataError when the grid or mask invariants do not hold.
  void validate() const;
};

struct WeatherRow {
  std::int64_t epoch = 0;
  double temperature = 0.0;
  double humidity = 0.0;
  double wind_speed = 0.0;
};

/// Calendar and weather per step of a SeriesFrame. Weather is raw here; it is
/// z-scored with training statistics when windows are built.
struct TemporalFeatureFrame {
  std::vector<std::size_t> slot;  // [0, 96)
  std::vector<std::size_t> day;   // [0, 7), Monday = 0
  std::vector<double> temperature;
  std::vector<double> humidity;
  std::vector<double> wind_speed;

  std::size_t steps() const { return slot.size(); }
};

SeriesFrame load_pa_csv(const std::filesystem::path& path);
std::vector<LotRecord> load_lots_csv(const std::filesystem::path& path);
std::vector<WeatherRow> load_weather_csv(const std::filesystem::path& path);

/// Weather is aligned to the frame's grid by last observation per slot, then
/// filled forward/backward. With no weather at all the channels are zero.
TemporalFeatureFrame build_temporal_frame(const SeriesFrame& frame, std::span<const WeatherRow> weather);

void write_pa_csv(const std::filesystem::path& path, const SeriesFrame& frame);
void write_lots_csv(const std::filesystem::path& path, std::span<const LotRecord> lots);
void write_weather_csv(const std::filesystem::path& path, const SeriesFrame& frame,
                       const TemporalFeatureFrame& features);

struct SplitBoundaries {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  std::size_t total = 0;
};

/// Contiguous chronological split by integer ratios (default 10:1:1).
SplitBoundaries split_boundaries(std::size_t steps, std::size_t train_parts = 10, std::size_t val_parts = 1,
                                 std::size_t test_parts = 1);

struct FilterOptions {
  double max_missing = 0.30;
  double kl_threshold = 0.5;
  std::size_t bins = 32;
  double smoothing = 1e-6;
};

/// KL(test || train) between smoothed 32-bin histograms over the lot's
/// observed range. Each normalized histogram gets `smoothing` added per bin.
double lot_kl_divergence(const SeriesFrame& frame, std::size_t lot, const SplitBoundaries& split,
                         const FilterOptions& options = {});

/// Keeps lots with missing rate below max_missing and KL at or below the
/// threshold. Throws DataError when nothing survives.
SeriesFrame filter_lots(const SeriesFrame& frame, const SplitBoundaries& split, const FilterOptions& options = {});

/// Forward fill then backward fill per lot; the observed mask is unchanged.
SeriesFrame impute_missing(const SeriesFrame& frame);

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;

  double normalize(double v, std::size_t lot) const { return (v - mean[lot]) / std[lot]; }
  double denormalize(double z, std::size_t lot) const { return z * std[lot] + mean[lot]; }
};

/// Per-lot mean/std over observed values in [begin, end). Zero spread maps to 1.
NormStats lot_stats(const SeriesFrame& frame, std::size_t begin, std::size_t end);

struct Batch {
  Tensor x;         // (B, T, N), normalized
  Tensor temporal;  // (B, T, C_t)
  Tensor y;         // (B, tau, N), normalized
  Tensor mask;      // (B, tau, N), 1 where the target was observed
  std::vector<std::size_t> starts;
};

/// Normalized series shared by every split.
struct PreparedSeries {
  std::size_t lots = 0;
  std::vector<double> values;  // (steps, lots), normalized
  std::vector<double> raw;     // (steps, lots), imputed spaces
  std::vector<std::uint8_t> observed;
  std::vector<double> features;  // (steps, kTemporalFeatures)
  std::vector<std::size_t> slot;
  std::vector<std::size_t> day;
};

/// Stride-one windows whose inputs and targets lie inside [begin, end).
/// Windows are assembled lazily per batch.
class WindowedDataset {
 public:
  WindowedDataset() = default;
  WindowedDataset(std::shared_ptr<const PreparedSeries> series, std::size_t begin, std::size_t end,
                  std::size_t history, std::size_t horizon);

  std::size_t size() const { return windows_; }
  std::size_t history() const { return history_; }
  std::size_t horizon() const { return horizon_; }
  std::size_t lots() const { return series_ ? series_->lots : 0; }
  std::size_t begin() const { return begin_; }
  std::size_t end() const { return end_; }
  /// Absolute step index of window w's first input step.
  std::size_t start(std::size_t w) const { return begin_ + w; }
  const PreparedSeries& series() const { return *series_; }

  Batch batch(std::span<const std::size_t> windows) const;

 private:
  std::shared_ptr<const PreparedSeries> series_;
  std::size_t begin_ = 0;
  std::size_t end_ = 0;
  std::size_t history_ = 0;
  std::size_t horizon_ = 0;
  std::size_t windows_ = 0;
};

struct WeatherStats {
  double mean[3] = {0, 0, 0};
  double std[3] = {1, 1, 1};
};

struct PreparedData {
  std::vector<std::string> lot_ids;
  SplitBoundaries boundaries;
  NormStats stats;
  WeatherStats weather;
  SpatialInputs spatial;
  std::size_t planning_vocab = 1;
  std::size_t land_use_vocab = 1;
  std::int64_t first_timestamp = 0;
  int offset_minutes = 0;
  std::shared_ptr<const PreparedSeries> series;
  WindowedDataset train;
  WindowedDataset val;
  WindowedDataset test;
};

/// Lat/lon/road density min-max scaled across lots, plus categorical ids.
/// Lots missing from `lots` are a DataError.
SpatialInputs build_spatial_inputs(std::span<const std::string> lot_ids, std::span<const LotRecord> lots,
                                   std::size_t* planning_vocab = nullptr, std::size_t* land_use_vocab = nullptr);

/// Expects an imputed frame. Throws DataError when a split cannot hold one window.
PreparedData split_and_window(const SeriesFrame& frame, const TemporalFeatureFrame& features,
                              std::span<const LotRecord> lots, std::size_t history, std::size_t horizon,
                              std::size_t train_parts = 10, std::size_t val_parts = 1, std::size_t test_parts = 1);

/// Normalized values and temporal features under fixed statistics.
std::shared_ptr<const PreparedSeries> build_prepared_series(const SeriesFrame& frame,
                                                            const TemporalFeatureFrame& features,
                                                            const NormStats& stats, const WeatherStats& weather);

/// Columns for `lot_ids`, in that order. Throws DataError on an unknown id.
SeriesFrame select_lots(const SeriesFrame& frame, std::span<const std::string> lot_ids);

/// Boundaries, lot ids and normalization statistics as a JSON document.
std::string split_manifest(const PreparedData& data);

/// Loads pa.csv, lots.csv and weather.csv (optional) from a directory.
struct RawDataset {
  SeriesFrame frame;
  std::vector<LotRecord> lots;
  std::vector<WeatherRow> weather;
};
RawDataset load_dataset_dir(const std::filesystem::path& dir);

/// filter, impute, build features, split and window.
PreparedData prepare_dataset(const RawDataset& raw, std::size_t history, std::size_t horizon,
                             const FilterOptions& filter = {});

/// Selects `lot_ids`, imputes and normalizes with statistics fitted earlier
/// (a checkpoint's) instead of refitting. Splits too short for a window are
/// left empty.
PreparedData prepare_with_stats(const RawDataset& raw, std::span<const std::string> lot_ids, const NormStats& stats,
                                const WeatherStats& weather, std::size_t history, std::size_t horizon);

struct SynthOptions {
  double diffusion = 0.1;     // per-step exchange rate with each ring neighbour
  double noise = 0.05;        // innovation std as a fraction of capacity
  double persistence = 0.95;  // decay of the deviation from the daily profile
  std::int64_t start_epoch = 1704038400;  // 2024-01-01T00:00:00+08:00, a Monday
  int offset_minutes = 480;
};

struct SynthData {
  SeriesFrame frame;
  TemporalFeatureFrame features;
  std::vector<LotRecord> lots;
  std::vector<double> capacity;
};

/// One heat-diffusion step on a ring: x_i += kappa * sum_j (x_j - x_i).
std::vector<double> ring_diffusion_step(std::span<const double> x, double kappa);

/// Ring of lots whose occupancy follows a per-lot daily sinusoid (amplitude by
/// land-use class, damped on weekends) plus a diffusing, weather-correlated
/// deviation. Deterministic in seed.
SynthData synth_generate(std::size_t n_lots, std::size_t n_days, std::uint64_t seed, const SynthOptions& options = {});

}  // namespace stpark
