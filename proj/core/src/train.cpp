#include "stpark/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "stpark/errors.hpp"
#include "stpark/ops.hpp"

namespace stpark {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw DataError("train config: " + what); };
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(lr0 > 0.0)) fail("lr0 must be positive");
  if (lr_halving_period == 0) fail("lr_halving_period must be positive");
  if (max_epochs == 0) fail("max_epochs must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) fail("betas must lie in (0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
  if (patience == 0) fail("patience must be positive");
}

Tensor mae_loss(const Tensor& pred, const Tensor& target, const Tensor& mask) { return masked_mae(pred, target, mask); }

void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].numel() || state.m[i].size() != params[i].numel()) {
      throw DimensionError("adam_step: size mismatch for parameter " + std::to_string(i) + " of shape " +
                           to_string(params[i].shape()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      w[k] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

double lr_schedule(std::size_t epoch, double lr0, std::size_t period) {
  return lr0 * std::pow(0.5, static_cast<double>(epoch / period));
}

std::string EpochLog::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["train_mae"] = train_mae;
  j["val_mae"] = val_mae;
  j["lr"] = lr;
  j["seconds"] = seconds;
  return j.dump();
}

WindowForecasts window_targets(const WindowedDataset& data) {
  WindowForecasts f;
  f.windows = data.size();
  f.horizon = data.horizon();
  f.lots = data.lots();
  const auto& s = data.series();
  const std::size_t n = f.lots;
  f.target.reserve(f.windows * f.horizon * n);
  f.mask.reserve(f.windows * f.horizon * n);
  for (std::size_t w = 0; w < f.windows; ++w) {
    const std::size_t first = data.start(w) + data.history();
    for (std::size_t h = 0; h < f.horizon; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        f.target.push_back(s.raw[(first + h) * n + i]);
        f.mask.push_back(s.observed[(first + h) * n + i] ? 1.0 : 0.0);
      }
    }
  }
  return f;
}

WindowForecasts predict_windows(const DeepPA& model, const PreparedData& prepared, const WindowedDataset& data,
                                std::size_t batch_size) {
  WindowForecasts f = window_targets(data);
  const DeepPA frozen(model.config(), model.params().frozen());
  f.pred.reserve(f.target.size());
  std::vector<std::size_t> idx;
  for (std::size_t first = 0; first < data.size(); first += batch_size) {
    idx.clear();
    for (std::size_t w = first; w < std::min(data.size(), first + batch_size); ++w) idx.push_back(w);
    const Batch b = data.batch(idx);
    const Tensor y = frozen.forward(b.x, b.temporal, prepared.spatial);
    const auto v = y.data();
    for (std::size_t k = 0; k < v.size(); ++k) f.pred.push_back(prepared.stats.denormalize(v[k], k % f.lots));
  }
  return f;
}

MetricsReport evaluate(const WindowForecasts& f) {
  const std::size_t expected = f.windows * f.horizon * f.lots;
  if (f.pred.size() != expected || f.target.size() != expected || f.mask.size() != expected) {
    throw DimensionError("evaluate: forecasts, targets and mask must all have " + std::to_string(expected) +
                         " entries");
  }
  if (f.horizon == 0) throw DimensionError("evaluate: empty horizon");
  MetricsReport r;
  r.truncated = f.horizon < 12;
  const std::size_t steps = std::min<std::size_t>(f.horizon, 12);
  std::vector<double> abs_sum(f.horizon, 0.0);
  std::vector<double> sq_sum(f.horizon, 0.0);
  std::vector<std::size_t> count(f.horizon, 0);
  for (std::size_t w = 0; w < f.windows; ++w) {
    for (std::size_t h = 0; h < f.horizon; ++h) {
      for (std::size_t i = 0; i < f.lots; ++i) {
        const std::size_t k = (w * f.horizon + h) * f.lots + i;
        if (f.mask[k] == 0.0) continue;
        const double e = f.pred[k] - f.target[k];
        abs_sum[h] += std::abs(e);
        sq_sum[h] += e * e;
        ++count[h];
      }
    }
  }
  auto bucket = [&](std::string name, std::size_t first, std::size_t last) {
    BucketMetrics b{std::move(name), first, last, 0.0, 0.0, 0};
    double a = 0.0;
    double s = 0.0;
    for (std::size_t h = first - 1; h < last; ++h) {
      a += abs_sum[h];
      s += sq_sum[h];
      b.count += count[h];
    }
    if (b.count > 0) {
      b.mae = a / static_cast<double>(b.count);
      b.rmse = std::max(std::sqrt(s / static_cast<double>(b.count)), b.mae);
    }
    return b;
  };
  for (std::size_t h = 0; h < f.horizon; ++h) {
    const BucketMetrics b = bucket("", h + 1, h + 1);
    r.step_mae.push_back(b.mae);
    r.step_rmse.push_back(b.rmse);
  }
  for (std::size_t first : {1u, 5u, 9u}) {
    if (first > steps) break;
    const std::size_t last = std::min(first + 3, steps);
    r.buckets.push_back(bucket(std::to_string(first) + "-" + std::to_string(last), first, last));
  }
  r.buckets.push_back(bucket("average", 1, steps));
  return r;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["truncated"] = truncated;
  j["buckets"] = nlohmann::json::array();
  for (const auto& b : buckets) {
    j["buckets"].push_back({{"name", b.name},
                            {"first_step", b.first_step},
                            {"last_step", b.last_step},
                            {"mae", b.mae},
                            {"rmse", b.rmse},
                            {"count", b.count}});
  }
  j["step_mae"] = step_mae;
  j["step_rmse"] = step_rmse;
  return j.dump(2);
}

std::string MetricsReport::to_table() const {
  std::ostringstream out;
  char cell[64];
  out << "metric";
  for (const auto& b : buckets) {
    const std::string label =
        b.name == "average" ? "avg 1-" + std::to_string(b.last_step) : "steps " + b.name;
    std::snprintf(cell, sizeof(cell), " | %-14s", label.c_str());
    out << cell;
  }
  out << '\n';
  for (int row = 0; row < 2; ++row) {
    out << (row == 0 ? "MAE   " : "RMSE  ");
    for (const auto& b : buckets) {
      std::snprintf(cell, sizeof(cell), " | %-14.6g", row == 0 ? b.mae : b.rmse);
      out << cell;
    }
    out << '\n';
  }
  if (truncated) out << "(horizon shorter than 12 steps; buckets truncated)\n";
  return out.str();
}

EpochLog train_epoch(DeepPA& model, const PreparedData& data, const TrainConfig& config, TrainState& state) {
  const auto started = std::chrono::steady_clock::now();
  const std::size_t epoch = state.epoch;
  const double lr = lr_schedule(epoch, config.lr0, config.lr_halving_period);

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed * 0x9E3779B97F4A7C15ULL + epoch + 1);
  std::shuffle(order.begin(), order.end(), rng);

  auto params = model.params().tensors();
  std::vector<std::vector<double>> grads(params.size());
  double loss_sum = 0.0;
  std::size_t batches = 0;
  std::vector<std::size_t> idx;
  for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
    if (config.max_batches != 0 && batches == config.max_batches) break;
    idx.assign(order.begin() + static_cast<std::ptrdiff_t>(first),
               order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), first + config.batch_size)));
    const Batch b = data.train.batch(idx);
    model.params().zero_grad();
    double value = 0.0;
    try {
      const Tensor pred = model.forward(b.x, b.temporal, data.spatial);
      Tensor loss = mae_loss(pred, b.y, b.mask);
      value = loss.item();
      if (!std::isfinite(value)) throw NumericError("loss is not finite");
      loss.backward();
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batches) + ": " + e.what());
    } catch (const DataError& e) {
      ++batches;
      continue;
    }
    for (std::size_t i = 0; i < params.size(); ++i) grads[i] = params[i].grad();
    adam_step(params, grads, state.adam, lr, config.beta1, config.beta2, config.eps);
    loss_sum += value;
    ++batches;
  }
  model.params().zero_grad();

  EpochLog log;
  log.epoch = epoch;
  log.lr = lr;
  log.train_mae = batches ? loss_sum / static_cast<double>(batches) : 0.0;
  log.val_mae = evaluate(predict_windows(model, data, data.val)).average().mae;
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  if (log.val_mae < state.best_val) {
    state.best_val = log.val_mae;
    state.best_epoch = epoch;
    state.epochs_since_best = 0;
    state.best = model.params().clone();
  } else {
    ++state.epochs_since_best;
  }
  state.log.push_back(log);
  ++state.epoch;
  return log;
}

TrainState train(DeepPA& model, const PreparedData& data, const TrainConfig& config, TrainState state,
                 const std::function<void(const EpochLog&, const TrainState&)>& on_epoch) {
  config.validate();
  while (state.epoch < config.max_epochs && state.epochs_since_best < config.patience) {
    const EpochLog log = train_epoch(model, data, config, state);
    if (on_epoch) on_epoch(log, state);
  }
  if (!state.best.entries().empty()) model.params() = state.best.clone();
  return state;
}

HistoricalAverage::HistoricalAverage(const PreparedSeries& series, std::size_t begin, std::size_t end)
    : lots_(series.lots) {
  const std::size_t n = lots_;
  key_sum_.assign(n * kSlotsPerDay * 7, 0.0);
  key_count_.assign(n * kSlotsPerDay * 7, 0.0);
  slot_sum_.assign(n * kSlotsPerDay, 0.0);
  slot_count_.assign(n * kSlotsPerDay, 0.0);
  std::vector<double> lot_sum(n, 0.0);
  std::vector<double> lot_count(n, 0.0);
  for (std::size_t t = begin; t < end; ++t) {
    const std::size_t slot = series.slot[t];
    const std::size_t day = series.day[t];
    for (std::size_t i = 0; i < n; ++i) {
      if (!series.observed[t * n + i]) continue;
      const double v = series.raw[t * n + i];
      key_sum_[(i * kSlotsPerDay + slot) * 7 + day] += v;
      key_count_[(i * kSlotsPerDay + slot) * 7 + day] += 1.0;
      slot_sum_[i * kSlotsPerDay + slot] += v;
      slot_count_[i * kSlotsPerDay + slot] += 1.0;
      lot_sum[i] += v;
      lot_count[i] += 1.0;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (lot_count[i] == 0.0) throw DataError("historical average: lot " + std::to_string(i) + " has no observations");
    lot_mean_.push_back(lot_sum[i] / lot_count[i]);
  }
}

double HistoricalAverage::predict(std::size_t lot, std::size_t slot, std::size_t day) const {
  const std::size_t key = (lot * kSlotsPerDay + slot) * 7 + day;
  if (key_count_[key] > 0.0) return key_sum_[key] / key_count_[key];
  const std::size_t s = lot * kSlotsPerDay + slot;
  if (slot_count_[s] > 0.0) return slot_sum_[s] / slot_count_[s];
  return lot_mean_[lot];
}

WindowForecasts HistoricalAverage::forecast(const WindowedDataset& data) const {
  WindowForecasts f = window_targets(data);
  const auto& s = data.series();
  for (std::size_t w = 0; w < f.windows; ++w) {
    const std::size_t first = data.start(w) + data.history();
    for (std::size_t h = 0; h < f.horizon; ++h) {
      for (std::size_t i = 0; i < f.lots; ++i) f.pred.push_back(predict(i, s.slot[first + h], s.day[first + h]));
    }
  }
  return f;
}

}  // namespace stpark
