#include "stpark/commands.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"
#include "stpark/checkpoint.hpp"
#include "stpark/errors.hpp"
#include "stpark/service.hpp"

namespace stpark {

using nlohmann::json;

RawDataset to_raw_dataset(const SynthData& synth) {
  RawDataset raw{synth.frame, synth.lots, {}};
  for (std::size_t t = 0; t < synth.frame.steps(); ++t) {
    raw.weather.push_back({synth.frame.timestamps[t], synth.features.temperature[t], synth.features.humidity[t],
                           synth.features.wind_speed[t]});
  }
  return raw;
}

RawDataset load_run_data(const DataConfig& data) {
  if (data.synth) return to_raw_dataset(synth_generate(data.synth->lots, data.synth->days, data.synth->seed));
  return load_dataset_dir(data.dir);
}

ModelConfig resolve_model_config(ModelConfig model, const PreparedData& data) {
  model.n_lots = data.lot_ids.size();
  model.planning_vocab = data.planning_vocab;
  model.land_use_vocab = data.land_use_vocab;
  model.temporal_features = kTemporalFeatures;
  model.validate();
  return model;
}

TrainOutcome cmd_train(const RunConfig& config, std::ostream& out) {
  config.train.validate();
  const RawDataset raw = load_run_data(config.data);
  const PreparedData data = prepare_dataset(raw, config.model.history, config.model.horizon, config.data.filter);
  const ModelConfig model_config = resolve_model_config(config.model, data);
  DeepPA model(model_config, config.train.seed);

  TrainOutcome result;
  result.param_count = model.params().count();
  out << "params " << result.param_count << "\n";
  out << "lots " << data.lot_ids.size() << " train_windows " << data.train.size() << "\n" << std::flush;

  std::ofstream log(config.output.log, std::ios::trunc);
  if (!log) throw DataError("cannot open log " + config.output.log);
  result.state = train(model, data, config.train, {}, [&](const EpochLog& e, const TrainState&) {
    const std::string line = e.to_json();
    log << line << "\n" << std::flush;
    out << line << "\n" << std::flush;
  });

  Checkpoint ck;
  ck.config = model_config;
  ck.lot_ids = data.lot_ids;
  ck.stats = data.stats;
  ck.weather = data.weather;
  ck.params = model.params().clone();
  ck.train_state = result.state;
  save_checkpoint(config.output.checkpoint, ck);

  result.test = evaluate(predict_windows(model, data, data.test));
  out << "best_epoch " << result.state.best_epoch << " test_mae " << result.test.average().mae << "\n";
  out << "checkpoint " << config.output.checkpoint << " digest " << ck.digest << "\n";
  return result;
}

MetricsReport cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                       std::ostream& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const RawDataset raw = load_dataset_dir(data_dir);
  const PreparedData data =
      prepare_with_stats(raw, ck.lot_ids, ck.stats, ck.weather, ck.config.history, ck.config.horizon);
  if (data.test.size() == 0) throw DataError("the test split of " + data_dir.string() + " holds no full window");
  const DeepPA model(ck.config, ck.params.clone());
  const MetricsReport report = evaluate(predict_windows(model, data, data.test));
  out << report.to_table() << report.to_json() << "\n";
  return report;
}

void cmd_predict(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                 const std::vector<std::string>& lots, std::ostream& out) {
  const Forecaster forecaster(load_checkpoint(checkpoint), load_dataset_dir(data_dir));
  const std::vector<std::string>& ids = lots.empty() ? forecaster.lot_ids() : lots;
  json payloads = json::array();
  for (const auto& id : ids) {
    if (!forecaster.has_lot(id)) throw DataError("unknown lot '" + id + "'");
    payloads.push_back(json::parse(forecaster.forecast(id, forecaster.horizon()).to_json()));
  }
  out << payloads.dump() << "\n";
}

void cmd_synth(std::size_t lots, std::size_t days, std::uint64_t seed, const std::filesystem::path& out_dir) {
  const SynthData s = synth_generate(lots, days, seed);
  std::filesystem::create_directories(out_dir);
  write_pa_csv(out_dir / "pa.csv", s.frame);
  write_lots_csv(out_dir / "lots.csv", s.lots);
  write_weather_csv(out_dir / "weather.csv", s.frame, s.features);
}

std::string MixerTiming::to_json() const {
  nlohmann::ordered_json j;
  j["variant"] = variant;
  j["lots"] = lots;
  j["hidden"] = hidden;
  j["forward_seconds"] = forward_seconds;
  j["backward_seconds"] = backward_seconds;
  j["total_seconds"] = total();
  return j.dump();
}

MixerTiming time_spatial_mixer(const std::string& variant, std::size_t lots, std::size_t hidden, std::size_t repeats) {
  if (variant != "gco" && variant != "msa") throw DataError("unknown bench variant '" + variant + "' (gco or msa)");
  if (repeats == 0) repeats = 1;
  ModelConfig config;
  config.n_lots = lots;
  config.hidden = hidden;
  config.spatial_hidden = hidden / 2;
  config.n_blocks = 1;
  config.validate();
  ModelParams params;
  if (variant == "gco") {
    params = init_params(config, 0);
  } else {
    model::add_dense_msa_params(params, config, "bench.", 0);
  }
  const std::size_t nodes = config.mixer_nodes();
  std::vector<double> x(nodes * hidden);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(0.37 * static_cast<double>(i));

  MixerTiming best{variant, lots, hidden, std::numeric_limits<double>::infinity(),
                   std::numeric_limits<double>::infinity()};
  using clock = std::chrono::steady_clock;
  for (std::size_t r = 0; r < repeats; ++r) {
    params.zero_grad();
    const Tensor h = Tensor::from({1, nodes, hidden}, x, true);
    const auto t0 = clock::now();
    const Tensor y = variant == "gco" ? model::slblock(h, config, params, "blocks.0.")
                                      : model::dense_msa_mixer(h, config, params, "bench.");
    const Tensor loss = sum(y);
    const auto t1 = clock::now();
    loss.backward();
    const auto t2 = clock::now();
    best.forward_seconds = std::min(best.forward_seconds, std::chrono::duration<double>(t1 - t0).count());
    best.backward_seconds = std::min(best.backward_seconds, std::chrono::duration<double>(t2 - t1).count());
  }
  return best;
}

void cmd_bench(const std::string& variant, const std::vector<std::size_t>& lots, std::ostream& out) {
  for (std::size_t n : lots) out << time_spatial_mixer(variant, n).to_json() << "\n" << std::flush;
}

std::string error_line(const std::exception& e) {
  std::string kind = "error";
  if (dynamic_cast<const DataError*>(&e)) kind = "data_error";
  else if (dynamic_cast<const CheckpointError*>(&e)) kind = "checkpoint_error";
  else if (dynamic_cast<const NumericError*>(&e)) kind = "numeric_error";
  else if (dynamic_cast<const DimensionError*>(&e)) kind = "dimension_error";
  return error_line(kind, e.what());
}

std::string error_line(const std::string& kind, const std::string& message) {
  return json{{"error", kind}, {"message", message}}.dump();
}

}  // namespace stpark
