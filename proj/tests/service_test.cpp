#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "stpark/checkpoint.hpp"
#include "stpark/commands.hpp"
#include "stpark/config.hpp"
#include "stpark/errors.hpp"
#include "stpark/service.hpp"

namespace stpark {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("stpark_service_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

ModelConfig small_model() {
  ModelConfig c;
  c.hidden = 8;
  c.spatial_hidden = 4;
  c.n_heads = 2;
  c.ffn_multiplier = 1;
  return c;
}

// Untrained but complete: data dir, prepared data and a checkpoint over it.
struct Fixture {
  fs::path dir;
  RawDataset raw;
  PreparedData data;
  Checkpoint ck;

  explicit Fixture(const std::string& name) : dir(fresh_dir(name)) {
    cmd_synth(6, 7, 3, dir);
    raw = load_dataset_dir(dir);
    data = prepare_dataset(raw, 12, 12, FilterOptions{0.3, 1e9, 32, 1e-6});
    ck.config = resolve_model_config(small_model(), data);
    ck.lot_ids = data.lot_ids;
    ck.stats = data.stats;
    ck.weather = data.weather;
    ck.params = init_params(ck.config, 11);
  }
};

TEST(Config, ParsesAllSectionsAndRejectsUnknownKeys) {
  const RunConfig c = parse_run_config(R"({
    "data": {"synth": {"lots": 5, "days": 3, "seed": 2}, "max_missing": 0.25},
    "model": {"hidden": 32, "use_tlblock": false, "activation": "relu"},
    "train": {"lr0": 0.002, "max_epochs": 4, "checkpoint": "a.ckpt"}})");
  ASSERT_TRUE(c.data.synth.has_value());
  EXPECT_EQ(c.data.synth->lots, 5u);
  EXPECT_DOUBLE_EQ(c.data.filter.max_missing, 0.25);
  EXPECT_EQ(c.model.hidden, 32u);
  EXPECT_FALSE(c.model.use_tlblock);
  EXPECT_EQ(c.model.activation, Activation::Relu);
  EXPECT_DOUBLE_EQ(c.train.lr0, 0.002);
  EXPECT_EQ(c.output.checkpoint, "a.ckpt");

  EXPECT_THROW(parse_run_config(R"({"data": {"dir": "x"}, "model": {"hiden": 3}})"), DataError);
  EXPECT_THROW(parse_run_config(R"({"data": {"dir": "x"}, "extra": {}})"), DataError);
  EXPECT_THROW(parse_run_config(R"({"data": {"dir": "x"}, "train": {"lr0": "fast"}})"), DataError);
  EXPECT_THROW(parse_run_config(R"({"data": {"dir": "x"}, "model": {"hidden": -4}})"), DataError);
  EXPECT_THROW(parse_run_config(R"({"data": {}})"), DataError);
  EXPECT_THROW(parse_run_config("{not json"), DataError);
}

TEST(Config, ModelConfigRoundTripsThroughJson) {
  ModelConfig c = small_model();
  c.k_modes = 3;
  c.use_temporal_node = false;
  c.activation = Activation::Identity;
  const ModelConfig back = model_config_from_json(model_config_to_json(c));
  EXPECT_EQ(model_config_to_json(back), model_config_to_json(c));
  EXPECT_EQ(back.k_modes, 3u);
  EXPECT_FALSE(back.use_temporal_node);
}

TEST(Config, SeedEnvironmentVariableOverridesConfig) {
  RunConfig c = parse_run_config(R"({"data": {"dir": "x"}, "train": {"seed": 5}})");
  ::setenv("STPARK_SEED", "42", 1);
  apply_env_overrides(c);
  EXPECT_EQ(c.train.seed, 42u);
  ::setenv("STPARK_SEED", "4x", 1);
  EXPECT_THROW(apply_env_overrides(c), DataError);
  ::unsetenv("STPARK_SEED");
  c.train.seed = 9;
  apply_env_overrides(c);
  EXPECT_EQ(c.train.seed, 9u);
}

TEST(Checkpoint, Sha256MatchesKnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Checkpoint, SaveLoadSaveIsByteIdenticalAndParamsBitwise) {
  Fixture f("roundtrip");
  const fs::path a = f.dir / "a.ckpt";
  const fs::path b = f.dir / "b.ckpt";
  save_checkpoint(a, f.ck);
  Checkpoint loaded = load_checkpoint(a);
  save_checkpoint(b, loaded);
  EXPECT_EQ(read_file(a), read_file(b));
  EXPECT_EQ(loaded.digest, f.ck.digest);
  ASSERT_EQ(loaded.params.entries().size(), f.ck.params.entries().size());
  for (std::size_t i = 0; i < loaded.params.entries().size(); ++i) {
    const auto& [key, t] = f.ck.params.entries()[i];
    const auto& [key2, t2] = loaded.params.entries()[i];
    EXPECT_EQ(key, key2);
    EXPECT_EQ(t.shape(), t2.shape());
    const auto x = t.data();
    const auto y = t2.data();
    EXPECT_EQ(std::memcmp(x.data(), y.data(), x.size() * sizeof(double)), 0) << key;
  }
  EXPECT_EQ(loaded.stats.mean, f.ck.stats.mean);
  EXPECT_EQ(loaded.stats.std, f.ck.stats.std);
  EXPECT_FALSE(loaded.train_state.has_value());
}

TEST(Checkpoint, OptimizerStateRoundTripsBitwise) {
  Fixture f("adam");
  TrainState s;
  s.epoch = 3;
  s.best_epoch = 1;
  s.epochs_since_best = 2;
  s.best_val = 12.345678901234567;
  s.best = f.ck.params.clone();
  s.adam.step = 77;
  for (const auto& [key, t] : f.ck.params.entries()) {
    std::vector<double> m(t.numel()), v(t.numel());
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] = std::sin(0.1 * static_cast<double>(i)) / 3.0;
      v[i] = 1e-300 * static_cast<double>(i);
    }
    s.adam.m.push_back(m);
    s.adam.v.push_back(v);
  }
  s.log.push_back({0, 0.5, 20.25, 1e-3, 0.125});
  f.ck.train_state = s;
  const std::string bytes = serialize_checkpoint(f.ck);
  Checkpoint back = parse_checkpoint(bytes);
  ASSERT_TRUE(back.train_state.has_value());
  const TrainState& t = *back.train_state;
  EXPECT_EQ(t.epoch, 3u);
  EXPECT_EQ(t.adam.step, 77u);
  EXPECT_EQ(t.best_val, s.best_val);
  EXPECT_EQ(t.adam.m, s.adam.m);
  EXPECT_EQ(t.adam.v, s.adam.v);
  ASSERT_EQ(t.log.size(), 1u);
  EXPECT_EQ(t.log[0].to_json(), s.log[0].to_json());
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, InfiniteBestValueSurvives) {
  Fixture f("inf");
  f.ck.train_state = TrainState{};
  Checkpoint back = parse_checkpoint(serialize_checkpoint(f.ck));
  EXPECT_TRUE(std::isinf(back.train_state->best_val));
}

TEST(Checkpoint, FlippedPayloadByteIsADigestError) {
  Fixture f("flip");
  std::string bytes = serialize_checkpoint(f.ck);
  bytes[bytes.size() - 5] ^= 0x01;
  try {
    parse_checkpoint(bytes);
    FAIL() << "corruption went unnoticed";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("digest"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, EditedHeaderIsADigestError) {
  Fixture f("header");
  std::string bytes = serialize_checkpoint(f.ck);
  const std::size_t pos = bytes.find("\"use_tlblock\":true");
  ASSERT_NE(pos, std::string::npos);
  bytes.replace(pos, 18, "\"use_tlblock\":fals");
  EXPECT_THROW(parse_checkpoint(bytes), CheckpointError);
}

TEST(Checkpoint, FutureVersionIsAnExplicitVersionError) {
  Fixture f("version");
  f.ck.format_version = kCheckpointFormatVersion + 1;
  const std::string bytes = serialize_checkpoint(f.ck);
  try {
    parse_checkpoint(bytes);
    FAIL() << "future version accepted";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("format_version"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, TruncatedAndForeignFilesAreRejected) {
  Fixture f("trunc");
  const std::string bytes = serialize_checkpoint(f.ck);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 8)), CheckpointError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, 40)), CheckpointError);
  EXPECT_THROW(parse_checkpoint("hello world"), CheckpointError);
  EXPECT_THROW(load_checkpoint(f.dir / "missing.ckpt"), CheckpointError);
}

TEST(Checkpoint, AtomicWriteLeavesNoTemporaryAndKeepsOldFileOnFailure) {
  const fs::path dir = fresh_dir("atomic");
  write_file_atomic(dir / "x.bin", "first");
  write_file_atomic(dir / "x.bin", "second");
  EXPECT_EQ(read_file(dir / "x.bin"), "second");
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    (void)e;
    ++files;
  }
  EXPECT_EQ(files, 1u);
  fs::create_directories(dir / "target_is_dir" / "child");
  EXPECT_ANY_THROW(write_file_atomic(dir / "target_is_dir", "third"));
  EXPECT_TRUE(fs::is_directory(dir / "target_is_dir"));
  EXPECT_ANY_THROW(write_file_atomic(dir / "no" / "such" / "dir" / "y.bin", "z"));
}

TEST(Forecaster, ReturnsRequestedStepsAtFifteenMinuteSpacing) {
  Fixture f("forecast");
  save_checkpoint(f.dir / "m.ckpt", f.ck);
  const Forecaster fc(load_checkpoint(f.dir / "m.ckpt"), f.raw);
  const std::string lot = f.data.lot_ids.front();
  for (std::size_t k : {1u, 5u, 12u}) {
    const ForecastPayload p = fc.forecast(lot, k);
    ASSERT_EQ(p.predicted.size(), k);
    ASSERT_EQ(p.timestamps.size(), k);
    std::int64_t prev = parse_iso8601(p.issued_at).epoch;
    EXPECT_EQ(prev, f.raw.frame.timestamps.back());
    for (const auto& ts : p.timestamps) {
      const std::int64_t t = parse_iso8601(ts).epoch;
      EXPECT_EQ(t - prev, 900);
      prev = t;
    }
    for (double v : p.predicted) EXPECT_GE(v, 0.0);
    EXPECT_EQ(p.recent.size(), 12u);
  }
  EXPECT_THROW(fc.forecast(lot, 0), std::invalid_argument);
  EXPECT_THROW(fc.forecast(lot, 13), std::invalid_argument);
  EXPECT_THROW(fc.forecast("nope", 3), std::out_of_range);
}

TEST(Forecaster, MatchesTheModelOnTheLastWindow) {
  Fixture f("oracle");
  const Forecaster fc(f.ck, f.raw);
  // Independent route: run the model over the raw series' last 12 steps.
  const PreparedSeries& s = *f.data.series;
  const std::size_t n = s.lots;
  const std::size_t steps = s.slot.size();
  std::vector<double> x(s.values.end() - static_cast<std::ptrdiff_t>(12 * n), s.values.end());
  std::vector<double> t(s.features.end() - static_cast<std::ptrdiff_t>(12 * kTemporalFeatures), s.features.end());
  ASSERT_GE(steps, 12u);
  const DeepPA model(f.ck.config, f.ck.params.clone());
  const Tensor y = model.forward(Tensor::from({1, 12, n}, x), Tensor::from({1, 12, kTemporalFeatures}, t),
                                 f.data.spatial);
  for (std::size_t i = 0; i < n; ++i) {
    const ForecastPayload p = fc.forecast(f.data.lot_ids[i], 12);
    for (std::size_t h = 0; h < 12; ++h) {
      const double expect = std::max(0.0, f.ck.stats.denormalize(y.at({0, h, i}), i));
      EXPECT_EQ(p.predicted[h], expect);
    }
  }
}

TEST(Forecaster, RejectsDataWithoutTheCheckpointLots) {
  Fixture f("missing_lot");
  f.ck.lot_ids.back() = "ZZZ";
  EXPECT_THROW(Forecaster(f.ck, f.raw), DataError);
}

TEST(Handlers, StatusCodesFollowTheContract) {
  Fixture f("handlers");
  const Forecaster fc(f.ck, f.raw);
  const std::string lot = f.data.lot_ids.front();
  using Q = std::multimap<std::string, std::string>;
  EXPECT_EQ(handle_forecast(&fc, Q{{"lot", lot}, {"steps", "12"}}).status, 200);
  EXPECT_EQ(handle_forecast(&fc, Q{{"lot", lot}}).status, 200);
  EXPECT_EQ(handle_forecast(&fc, Q{{"lot", lot}, {"steps", "0"}}).status, 400);
  EXPECT_EQ(handle_forecast(&fc, Q{{"lot", lot}, {"steps", "13"}}).status, 400);
  EXPECT_EQ(handle_forecast(&fc, Q{{"lot", lot}, {"steps", "3x"}}).status, 400);
  EXPECT_EQ(handle_forecast(&fc, Q{{"lot", lot}, {"steps", "-1"}}).status, 400);
  EXPECT_EQ(handle_forecast(&fc, Q{{"steps", "3"}}).status, 400);
  EXPECT_EQ(handle_forecast(&fc, Q{{"lot", lot}, {"lot", lot}}).status, 400);
  EXPECT_EQ(handle_forecast(&fc, Q{{"lot", lot}, {"bogus", "1"}}).status, 400);
  EXPECT_EQ(handle_forecast(&fc, Q{{"lot", "nope"}, {"steps", "3"}}).status, 404);
  EXPECT_EQ(handle_forecast(nullptr, Q{{"lot", lot}}).status, 503);
  EXPECT_EQ(handle_health(nullptr).status, 503);

  const HttpReply bad = handle_forecast(&fc, Q{{"lot", "nope"}});
  EXPECT_TRUE(json::parse(bad.body).contains("error"));
  const json health = json::parse(handle_health(&fc).body);
  EXPECT_EQ(health["status"], "ok");
  EXPECT_EQ(health["digest"], fc.digest());
}

TEST(Server, ServesForecastsOverHttpDeterministically) {
  Fixture f("http");
  save_checkpoint(f.dir / "m.ckpt", f.ck);
  auto fc = std::make_shared<const Forecaster>(load_checkpoint(f.dir / "m.ckpt"), f.raw);
  ForecastServer server(fc);
  const int port = server.bind("127.0.0.1", 0);
  std::thread worker([&] { server.serve(); });
  httplib::Client client("127.0.0.1", port);
  const std::string lot = f.data.lot_ids.front();

  auto first = client.Get("/forecast?lot=" + lot + "&steps=12");
  ASSERT_TRUE(first);
  EXPECT_EQ(first->status, 200);
  const json body = json::parse(first->body);
  EXPECT_EQ(body["predicted"].size(), 12u);

  std::string a, b;
  std::thread t1([&] { a = httplib::Client("127.0.0.1", port).Get("/forecast?lot=" + lot + "&steps=7")->body; });
  std::thread t2([&] { b = httplib::Client("127.0.0.1", port).Get("/forecast?lot=" + lot + "&steps=7")->body; });
  t1.join();
  t2.join();
  EXPECT_EQ(a, b);

  EXPECT_EQ(client.Get("/forecast?lot=" + lot + "&steps=0")->status, 400);
  EXPECT_EQ(client.Get("/forecast?lot=nope")->status, 404);
  auto health = client.Get("/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(json::parse(health->body)["digest"], fc->digest());

  server.stop();
  worker.join();
}

TEST(Commands, SynthIsByteIdenticalForTheSameSeed) {
  const fs::path a = fresh_dir("synth_a");
  const fs::path b = fresh_dir("synth_b");
  cmd_synth(8, 7, 1, a);
  cmd_synth(8, 7, 1, b);
  for (const char* name : {"pa.csv", "lots.csv", "weather.csv"}) {
    EXPECT_EQ(read_file(a / name), read_file(b / name)) << name;
    EXPECT_FALSE(read_file(a / name).empty());
  }
}

TEST(Commands, TrainThenEvalAgreeAndTableMatchesJson) {
  const fs::path dir = fresh_dir("train");
  cmd_synth(6, 7, 2, dir / "data");
  RunConfig c;
  c.data.dir = (dir / "data").string();
  c.data.filter.kl_threshold = 1e9;
  c.model = small_model();
  c.train.max_epochs = 1;
  c.train.batch_size = 32;
  c.output.checkpoint = (dir / "m.ckpt").string();
  c.output.log = (dir / "log.jsonl").string();
  std::ostringstream train_out;
  const TrainOutcome outcome = cmd_train(c, train_out);
  EXPECT_NE(train_out.str().find("params " + std::to_string(outcome.param_count)), std::string::npos);
  EXPECT_TRUE(fs::exists(c.output.checkpoint));
  const std::string log = read_file(c.output.log);
  const json line = json::parse(log.substr(0, log.find('\n')));
  for (const char* key : {"epoch", "train_mae", "val_mae", "lr", "seconds"}) EXPECT_TRUE(line.contains(key)) << key;

  std::ostringstream eval_out;
  const MetricsReport r = cmd_eval(c.output.checkpoint, dir / "data", eval_out);
  EXPECT_NEAR(r.average().mae, outcome.test.average().mae, 1e-9);
  const std::string text = eval_out.str();
  const json j = json::parse(text.substr(text.find('{')));
  char cell[32];
  for (const auto& bucket : j["buckets"]) {
    std::snprintf(cell, sizeof(cell), "%.6g", bucket["mae"].get<double>());
    EXPECT_NE(text.find(cell), std::string::npos) << cell;
    std::snprintf(cell, sizeof(cell), "%.6g", bucket["rmse"].get<double>());
    EXPECT_NE(text.find(cell), std::string::npos) << cell;
  }
}

TEST(Commands, BenchTimesBothVariantsAndRejectsUnknownOnes) {
  const MixerTiming g = time_spatial_mixer("gco", 64, 16, 1);
  const MixerTiming m = time_spatial_mixer("msa", 64, 16, 1);
  EXPECT_GT(g.total(), 0.0);
  EXPECT_GT(m.total(), 0.0);
  EXPECT_EQ(json::parse(g.to_json())["lots"], 64);
  EXPECT_THROW(time_spatial_mixer("fft", 8), DataError);
}

TEST(Commands, ErrorLineIsOneLineOfJson) {
  const std::string line = error_line(DataError("bad\nthing"));
  EXPECT_EQ(line.find('\n'), std::string::npos);
  const json j = json::parse(line);
  EXPECT_EQ(j["error"], "data_error");
  EXPECT_EQ(j["message"], "bad\nthing");
  EXPECT_EQ(json::parse(error_line(CheckpointError("x")))["error"], "checkpoint_error");
}

}  // namespace
}  // namespace stpark
