#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "stpark/data.hpp"
#include "stpark/model.hpp"
#include "stpark/tensor.hpp"

namespace stpark {

struct TrainConfig {
  std::size_t batch_size = 8;
  double lr0 = 1e-3;
  std::size_t lr_halving_period = 3;
  std::size_t max_epochs = 30;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t patience = 10;
  /// Caps batches per epoch (0 = all); useful for quick runs.
  std::size_t max_batches = 0;

  void validate() const;
};

/// Mean |pred - target| over entries where mask is nonzero.
Tensor mae_loss(const Tensor& pred, const Tensor& target, const Tensor& mask);

struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update of `params` in place. State is sized on the
/// first call. Throws DimensionError on a param/grad size mismatch.
void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// lr0 * 0.5^floor(epoch / period)
double lr_schedule(std::size_t epoch, double lr0, std::size_t period);

struct EpochLog {
  std::size_t epoch = 0;
  double train_mae = 0.0;
  double val_mae = 0.0;
  double lr = 0.0;
  double seconds = 0.0;

  /// One JSON-lines record: {"epoch", "train_mae", "val_mae", "lr", "seconds"}.
  std::string to_json() const;
};

/// Everything needed to continue training where it stopped.
struct TrainState {
  std::size_t epoch = 0;
  AdamState adam;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t epochs_since_best = 0;
  ModelParams best;
  std::vector<EpochLog> log;
};

/// De-normalized forecasts for every window of a split, (windows, tau, lots).
struct WindowForecasts {
  std::size_t windows = 0;
  std::size_t horizon = 0;
  std::size_t lots = 0;
  std::vector<double> pred;
  std::vector<double> target;
  std::vector<double> mask;
};

/// Targets and mask of a split, de-normalized, with `pred` left empty.
WindowForecasts window_targets(const WindowedDataset& data);
WindowForecasts predict_windows(const DeepPA& model, const PreparedData& prepared, const WindowedDataset& data,
                                std::size_t batch_size = 64);

struct BucketMetrics {
  std::string name;
  std::size_t first_step = 0;  // 1-based, inclusive
  std::size_t last_step = 0;
  double mae = 0.0;
  double rmse = 0.0;
  std::size_t count = 0;
};

struct MetricsReport {
  std::vector<BucketMetrics> buckets;  // 1-4, 5-8, 9-12, then the average
  std::vector<double> step_mae;
  std::vector<double> step_rmse;
  /// Set when the horizon is shorter than 12 steps.
  bool truncated = false;

  const BucketMetrics& average() const { return buckets.back(); }
  std::string to_json() const;
  std::string to_table() const;
};

MetricsReport evaluate(const WindowForecasts& forecasts);

/// Trains one epoch and validates. Throws NumericError naming the epoch and
/// batch when the loss stops being finite.
EpochLog train_epoch(DeepPA& model, const PreparedData& data, const TrainConfig& config, TrainState& state);

/// Runs epochs until max_epochs or patience; `model` ends with the best
/// validation parameters. Resumes from `state` when it is not fresh.
TrainState train(DeepPA& model, const PreparedData& data, const TrainConfig& config, TrainState state = {},
                 const std::function<void(const EpochLog&, const TrainState&)>& on_epoch = {});

/// Mean of training observations keyed by (lot, slot, day of week), falling
/// back to (lot, slot) and then the lot mean.
class HistoricalAverage {
 public:
  HistoricalAverage(const PreparedSeries& series, std::size_t begin, std::size_t end);
  double predict(std::size_t lot, std::size_t slot, std::size_t day) const;
  WindowForecasts forecast(const WindowedDataset& data) const;

 private:
  std::size_t lots_ = 0;
  std::vector<double> key_sum_, key_count_;
  std::vector<double> slot_sum_, slot_count_;
  std::vector<double> lot_mean_;
};

/// X_t = c + sum_i A_i X_{t-i}, fit by ridge-stabilized least squares and
/// forecast by iteration.
class VarModel {
 public:
  static constexpr std::size_t kMaxRegressors = 2000;

  /// `values` is (steps, lots) row-major; fits on rows [begin, end).
  VarModel(std::span<const double> values, std::size_t lots, std::size_t begin, std::size_t end, std::size_t lag,
           double ridge = 1e-6);

  std::size_t lag() const { return lag_; }
  std::size_t lots() const { return lots_; }
  const std::vector<double>& intercept() const { return intercept_; }
  /// A_i as (lots, lots) row-major, i = 1..lag.
  const std::vector<double>& coefficients(std::size_t i) const { return coef_.at(i - 1); }

  /// `history` is (>= lag, lots) row-major, most recent row last.
  std::vector<double> forecast(std::span<const double> history, std::size_t steps) const;
  WindowForecasts forecast(const WindowedDataset& data) const;

 private:
  std::size_t lots_;
  std::size_t lag_;
  std::vector<double> intercept_;
  std::vector<std::vector<double>> coef_;
};

}  // namespace stpark
