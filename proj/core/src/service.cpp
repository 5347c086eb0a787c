#include "stpark/service.hpp"

#include <algorithm>
#include <charconv>
#include <stdexcept>

#include "httplib.h"
#include "json.hpp"
#include "stpark/errors.hpp"

namespace stpark {

using nlohmann::json;

std::string ForecastPayload::to_json() const {
  json j;
  j["lot_id"] = lot_id;
  j["issued_at"] = issued_at;
  j["timestamps"] = timestamps;
  j["predicted"] = predicted;
  j["recent_timestamps"] = recent_timestamps;
  j["recent"] = recent;
  return j.dump();
}

Forecaster::Forecaster(Checkpoint checkpoint, const RawDataset& raw) : checkpoint_(std::move(checkpoint)) {
  const ModelConfig& config = checkpoint_.config;
  const PreparedData data = prepare_with_stats(raw, checkpoint_.lot_ids, checkpoint_.stats, checkpoint_.weather,
                                               config.history, config.horizon);
  const PreparedSeries& series = *data.series;
  const std::size_t steps = series.slot.size();
  const std::size_t n = series.lots;
  const std::size_t t_hist = config.history;
  if (steps < t_hist) {
    throw DataError("data has " + std::to_string(steps) + " steps; the model needs " + std::to_string(t_hist));
  }
  if (n != config.n_lots) throw DataError("checkpoint lot list does not match its model config");
  for (std::size_t i = 0; i < n; ++i) lot_index_.emplace(checkpoint_.lot_ids[i], i);

  const std::size_t first = steps - t_hist;
  const std::vector<std::int64_t>& ts = raw.frame.timestamps;
  last_epoch_ = ts.back();
  offset_minutes_ = raw.frame.offset_minutes;
  recent_epochs_.assign(ts.end() - static_cast<std::ptrdiff_t>(t_hist), ts.end());
  recent_.assign(series.raw.begin() + static_cast<std::ptrdiff_t>(first * n), series.raw.end());

  std::vector<double> x(series.values.begin() + static_cast<std::ptrdiff_t>(first * n), series.values.end());
  std::vector<double> f(series.features.begin() + static_cast<std::ptrdiff_t>(first * kTemporalFeatures),
                        series.features.end());
  const DeepPA model(config, checkpoint_.params.frozen());
  const Tensor y = model.forward(Tensor::from({1, t_hist, n}, std::move(x)),
                                 Tensor::from({1, t_hist, kTemporalFeatures}, std::move(f)), data.spatial);
  const auto v = y.data();
  predicted_.resize(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) predicted_[k] = checkpoint_.stats.denormalize(v[k], k % n);
}

ForecastPayload Forecaster::forecast(const std::string& lot, std::size_t steps) const {
  auto it = lot_index_.find(lot);
  if (it == lot_index_.end()) throw std::out_of_range("unknown lot " + lot);
  if (steps < 1 || steps > horizon()) {
    throw std::invalid_argument("steps must be in [1, " + std::to_string(horizon()) + "]");
  }
  const std::size_t i = it->second;
  const std::size_t n = lot_index_.size();
  ForecastPayload p;
  p.lot_id = lot;
  p.issued_at = format_iso8601(last_epoch_, offset_minutes_);
  for (std::size_t h = 0; h < steps; ++h) {
    p.timestamps.push_back(format_iso8601(last_epoch_ + static_cast<std::int64_t>(h + 1) * kSlotSeconds,
                                          offset_minutes_));
    p.predicted.push_back(std::max(0.0, predicted_[h * n + i]));
  }
  for (std::size_t t = 0; t < recent_epochs_.size(); ++t) {
    p.recent_timestamps.push_back(format_iso8601(recent_epochs_[t], offset_minutes_));
    p.recent.push_back(recent_[t * n + i]);
  }
  return p;
}

namespace {

HttpReply error_reply(int status, const std::string& message) {
  return {status, json{{"error", message}, {"status", status}}.dump()};
}

}  // namespace

HttpReply handle_forecast(const Forecaster* forecaster, const std::multimap<std::string, std::string>& query) {
  if (!forecaster) return error_reply(503, "checkpoint not loaded");
  for (const auto& [key, value] : query) {
    if (key != "lot" && key != "steps") return error_reply(400, "unknown query parameter '" + key + "'");
    if (query.count(key) > 1) return error_reply(400, "query parameter '" + key + "' given more than once");
  }
  auto lot = query.find("lot");
  if (lot == query.end() || lot->second.empty()) return error_reply(400, "missing query parameter 'lot'");
  std::size_t steps = forecaster->horizon();
  if (auto s = query.find("steps"); s != query.end()) {
    const std::string& text = s->second;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), steps);
    if (text.empty() || ec != std::errc() || end != text.data() + text.size()) {
      return error_reply(400, "steps must be a positive integer");
    }
    if (steps < 1 || steps > forecaster->horizon()) {
      return error_reply(400, "steps must be in [1, " + std::to_string(forecaster->horizon()) + "]");
    }
  }
  if (!forecaster->has_lot(lot->second)) return error_reply(404, "unknown lot '" + lot->second + "'");
  return {200, forecaster->forecast(lot->second, steps).to_json()};
}

HttpReply handle_health(const Forecaster* forecaster) {
  if (!forecaster) return {503, json{{"status", "unavailable"}, {"error", "checkpoint not loaded"}}.dump()};
  return {200, json{{"status", "ok"},
                    {"digest", forecaster->digest()},
                    {"lots", forecaster->lot_ids().size()},
                    {"horizon", forecaster->horizon()}}
                   .dump()};
}

struct ForecastServer::Impl {
  std::shared_ptr<const Forecaster> forecaster;
  httplib::Server server;
};

ForecastServer::ForecastServer(std::shared_ptr<const Forecaster> forecaster) : impl_(std::make_unique<Impl>()) {
  impl_->forecaster = std::move(forecaster);
  const Forecaster* f = impl_->forecaster.get();
  auto send = [](httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    res.set_content(reply.body, "application/json; charset=utf-8");
  };
  impl_->server.Get("/forecast", [f, send](const httplib::Request& req, httplib::Response& res) {
    std::multimap<std::string, std::string> query(req.params.begin(), req.params.end());
    send(res, handle_forecast(f, query));
  });
  impl_->server.Get("/health", [f, send](const httplib::Request&, httplib::Response& res) {
    send(res, handle_health(f));
  });
}

ForecastServer::~ForecastServer() { stop(); }

int ForecastServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw std::runtime_error("cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) {
    throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  }
  return port;
}

void ForecastServer::serve() { impl_->server.listen_after_bind(); }

void ForecastServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace stpark
