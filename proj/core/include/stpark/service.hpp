#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "stpark/checkpoint.hpp"
#include "stpark/data.hpp"
#include "stpark/model.hpp"

namespace stpark {

/// What a line-graph display of one lot needs: recent observations and the
/// forecast that continues them.
struct ForecastPayload {
  std::string lot_id;
  std::string issued_at;                     // last observed step
  std::vector<std::string> timestamps;       // issued_at + 15 min, + 30 min, ...
  std::vector<double> predicted;             // spaces, clamped >= 0
  std::vector<std::string> recent_timestamps;
  std::vector<double> recent;                // the model's input window, spaces

  std::string to_json() const;
};

/// Forecasts from the latest history window of a dataset under a checkpoint.
/// Immutable after construction; safe to share across threads.
class Forecaster {
 public:
  /// Throws DataError when the data lacks a checkpoint lot or is shorter than
  /// the model's history.
  Forecaster(Checkpoint checkpoint, const RawDataset& raw);

  std::size_t horizon() const { return checkpoint_.config.horizon; }
  const std::string& digest() const { return checkpoint_.digest; }
  const std::vector<std::string>& lot_ids() const { return checkpoint_.lot_ids; }
  bool has_lot(const std::string& lot) const { return lot_index_.count(lot) != 0; }
  /// Throws std::out_of_range for an unknown lot and std::invalid_argument
  /// unless 1 <= steps <= horizon().
  ForecastPayload forecast(const std::string& lot, std::size_t steps) const;

 private:
  Checkpoint checkpoint_;
  std::map<std::string, std::size_t> lot_index_;
  std::int64_t last_epoch_ = 0;
  int offset_minutes_ = 0;
  std::vector<std::int64_t> recent_epochs_;
  std::vector<double> recent_;     // (T, N) spaces
  std::vector<double> predicted_;  // (tau, N) spaces, unclamped
};

/// Outcome of one HTTP request, independent of the transport.
struct HttpReply {
  int status = 200;
  std::string body;
};

/// Request handling behind the HTTP endpoint. A null forecaster answers 503.
HttpReply handle_forecast(const Forecaster* forecaster, const std::multimap<std::string, std::string>& query);
HttpReply handle_health(const Forecaster* forecaster);

/// GET /forecast?lot=<id>&steps=<k> and GET /health over HTTP.
class ForecastServer {
 public:
  explicit ForecastServer(std::shared_ptr<const Forecaster> forecaster);
  ~ForecastServer();
  ForecastServer(const ForecastServer&) = delete;
  ForecastServer& operator=(const ForecastServer&) = delete;

  /// Binds to host:port (0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks serving requests until stop().
  void serve();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace stpark
