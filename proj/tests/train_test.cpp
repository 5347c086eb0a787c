#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "stpark/errors.hpp"
#include "stpark/train.hpp"

using namespace stpark;

namespace {

WindowForecasts forecasts(std::size_t windows, std::size_t horizon, std::size_t lots, std::vector<double> pred,
                          std::vector<double> target) {
  WindowForecasts f;
  f.windows = windows;
  f.horizon = horizon;
  f.lots = lots;
  f.pred = std::move(pred);
  f.target = std::move(target);
  f.mask.assign(f.target.size(), 1.0);
  return f;
}

ModelConfig small_config(const PreparedData& d) {
  ModelConfig c;
  c.n_lots = d.lot_ids.size();
  c.hidden = 8;
  c.spatial_hidden = 4;
  c.n_heads = 2;
  c.ffn_multiplier = 2;
  c.planning_vocab = d.planning_vocab;
  c.land_use_vocab = d.land_use_vocab;
  return c;
}

PreparedData small_data() {
  const SynthData s = synth_generate(8, 7, 3);
  return split_and_window(s.frame, s.features, s.lots, 12, 12);
}

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig tc;
  tc.max_epochs = epochs;
  tc.max_batches = 12;
  tc.seed = 5;
  return tc;
}

}  // namespace

TEST(MaeLoss, Examples) {
  const Tensor y = Tensor::from({2}, {2, 4});
  const Tensor full = Tensor::from({2}, {1, 1});
  EXPECT_EQ(mae_loss(y, y, full).item(), 0.0);
  EXPECT_EQ(mae_loss(Tensor::from({2}, {1, 2}), y, full).item(), 1.5);
  EXPECT_EQ(mae_loss(Tensor::from({2}, {1, 2}), y, Tensor::from({2}, {1, 0})).item(), 1.0);
  EXPECT_THROW(mae_loss(y, y, Tensor::from({2}, {0, 0})), DataError);
}

TEST(Adam, ClosedFormScalarStep) {
  std::vector<Tensor> p{Tensor::from({1}, {0.0})};
  const std::vector<std::vector<double>> g{{1.0}};
  AdamState state;
  adam_step(p, g, state, 1e-3);
  // m_hat = 1, v_hat = 1 after bias correction.
  EXPECT_NEAR(p[0].item(), -1e-3 / (1.0 + 1e-8), 1e-12);
  EXPECT_EQ(state.step, 1u);
  EXPECT_NEAR(state.m[0][0], 0.1, 1e-15);
  EXPECT_NEAR(state.v[0][0], 0.001, 1e-15);
}

TEST(Adam, MultiStepMatchesScalarRecurrence) {
  std::vector<Tensor> p{Tensor::from({3}, {0.5, -1.0, 2.0})};
  AdamState state;
  double w = -1.0;
  double m = 0.0;
  double v = 0.0;
  for (int t = 1; t <= 25; ++t) {
    const double g = std::sin(0.3 * t) + 0.1;
    adam_step(p, std::vector<std::vector<double>>{{0.0, g, 0.0}}, state, 2e-3);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    w -= 2e-3 * (m / (1.0 - std::pow(0.9, t))) / (std::sqrt(v / (1.0 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(p[0].data()[1], w, 1e-12);
  EXPECT_EQ(p[0].data()[0], 0.5);
  EXPECT_EQ(p[0].data()[2], 2.0);
}

TEST(Adam, ZeroGradientFixedPointAndMomentDecay) {
  std::vector<Tensor> p{Tensor::from({2}, {1.5, -2.5})};
  AdamState state;
  adam_step(p, std::vector<std::vector<double>>{{0.0, 0.0}}, state, 1e-3);
  EXPECT_EQ(p[0].to_vector(), (std::vector<double>{1.5, -2.5}));

  AdamState warm;
  warm.step = 4;
  warm.m = {{0.5, -0.5}};
  warm.v = {{0.2, 0.3}};
  std::vector<Tensor> q{Tensor::from({2}, {0.0, 0.0})};
  adam_step(q, std::vector<std::vector<double>>{{0.0, 0.0}}, warm, 1e-3);
  EXPECT_NEAR(warm.m[0][0], 0.45, 1e-15);
  EXPECT_NEAR(warm.v[0][1], 0.2997, 1e-15);
}

TEST(Adam, DeterministicAndShapeChecked) {
  auto run = [] {
    std::vector<Tensor> p{Tensor::from({4}, {1, 2, 3, 4})};
    AdamState state;
    for (int t = 0; t < 10; ++t) {
      adam_step(p, std::vector<std::vector<double>>{{0.1 * t, -0.2, 0.3, std::cos(t)}}, state, 1e-2);
    }
    return p[0].to_vector();
  };
  EXPECT_EQ(run(), run());
  std::vector<Tensor> p{Tensor::from({2}, {1, 2})};
  AdamState state;
  EXPECT_THROW(adam_step(p, std::vector<std::vector<double>>{{1.0}}, state, 1e-3), DimensionError);
}

TEST(LrSchedule, HalvesEveryPeriod) {
  EXPECT_EQ(lr_schedule(0, 1e-3, 3), 1e-3);
  EXPECT_EQ(lr_schedule(2, 1e-3, 3), 1e-3);
  EXPECT_EQ(lr_schedule(3, 1e-3, 3), 5e-4);
  EXPECT_EQ(lr_schedule(6, 1e-3, 3), 2.5e-4);
  EXPECT_EQ(lr_schedule(7, 1e-3, 3), 2.5e-4);
}

TEST(Evaluate, HandFixtures) {
  const MetricsReport perfect = evaluate(forecasts(2, 12, 3, std::vector<double>(72, 4.0), std::vector<double>(72, 4.0)));
  ASSERT_EQ(perfect.buckets.size(), 4u);
  for (const auto& b : perfect.buckets) {
    EXPECT_EQ(b.mae, 0.0);
    EXPECT_EQ(b.rmse, 0.0);
  }
  EXPECT_EQ(perfect.buckets[0].name, "1-4");
  EXPECT_EQ(perfect.buckets[2].last_step, 12u);
  EXPECT_FALSE(perfect.truncated);

  const MetricsReport single = evaluate(forecasts(1, 1, 2, {3.0, -4.0}, {0.0, 0.0}));
  EXPECT_NEAR(single.average().mae, 3.5, 1e-12);
  EXPECT_NEAR(single.average().rmse, std::sqrt(12.5), 1e-12);
  EXPECT_TRUE(single.truncated);
  EXPECT_EQ(single.buckets.size(), 2u);

  std::vector<double> target(5 * 12 * 4);
  std::iota(target.begin(), target.end(), 0.0);
  std::vector<double> pred = target;
  for (double& v : pred) v -= 2.75;
  const MetricsReport constant = evaluate(forecasts(5, 12, 4, pred, target));
  for (const auto& b : constant.buckets) {
    EXPECT_NEAR(b.mae, 2.75, 1e-12);
    EXPECT_NEAR(b.rmse, 2.75, 1e-12);
  }
}

TEST(Evaluate, BucketsMasksAndRmseBound) {
  // Error equals the step number, so bucket values are closed form.
  std::vector<double> pred;
  for (std::size_t w = 0; w < 3; ++w)
    for (std::size_t h = 1; h <= 12; ++h)
      for (std::size_t n = 0; n < 2; ++n) pred.push_back(static_cast<double>(h));
  WindowForecasts f = forecasts(3, 12, 2, pred, std::vector<double>(pred.size(), 0.0));
  MetricsReport r = evaluate(f);
  EXPECT_NEAR(r.buckets[0].mae, 2.5, 1e-12);
  EXPECT_NEAR(r.buckets[1].rmse, std::sqrt((25.0 + 36 + 49 + 64) / 4.0), 1e-12);
  EXPECT_NEAR(r.average().mae, 6.5, 1e-12);
  EXPECT_EQ(r.step_mae.size(), 12u);

  f.mask[0] = 0.0;
  f.pred[0] = 1e6;
  EXPECT_NEAR(evaluate(f).buckets[0].mae, 59.0 / 23.0, 1e-12);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> dist(0.0, 10.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> p(2 * 12 * 3);
    std::vector<double> t(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = dist(rng);
      t[i] = dist(rng);
    }
    for (const auto& b : evaluate(forecasts(2, 12, 3, p, t)).buckets) EXPECT_GE(b.rmse, b.mae);
  }
  EXPECT_THROW(evaluate(forecasts(1, 2, 2, {1, 2, 3}, {1, 2, 3, 4})), DimensionError);
}

TEST(Evaluate, TableAndJsonAgree) {
  std::vector<double> pred(24);
  std::iota(pred.begin(), pred.end(), 0.5);
  const MetricsReport r = evaluate(forecasts(1, 12, 2, pred, std::vector<double>(24, 0.0)));
  const std::string table = r.to_table();
  char cell[32];
  std::snprintf(cell, sizeof(cell), "%-14.6g", r.average().mae);
  EXPECT_NE(table.find(cell), std::string::npos);
  EXPECT_NE(r.to_json().find("\"average\""), std::string::npos);
}

TEST(HistoricalAverage, PeriodicSignalIsExact) {
  SynthOptions quiet;
  quiet.diffusion = 0.0;
  quiet.noise = 0.0;
  const SynthData s = synth_generate(6, 21, 8, quiet);
  const PreparedData d = split_and_window(s.frame, s.features, s.lots, 12, 12);
  const HistoricalAverage ha(*d.series, 0, d.boundaries.train_end);
  EXPECT_LT(evaluate(ha.forecast(d.test)).average().mae, 1e-9);
  EXPECT_LT(evaluate(ha.forecast(d.val)).average().mae, 1e-9);
}

TEST(HistoricalAverage, MeanAndFallbackChain) {
  PreparedSeries s;
  s.lots = 1;
  // Two Monday 08:00 readings, one Tuesday 08:00, one Monday 09:00.
  s.raw = {10, 20, 40, 7};
  s.observed = {1, 1, 1, 1};
  s.slot = {32, 32, 32, 36};
  s.day = {0, 0, 1, 0};
  const HistoricalAverage ha(s, 0, 4);
  EXPECT_EQ(ha.predict(0, 32, 0), 15.0);
  EXPECT_EQ(ha.predict(0, 32, 1), 40.0);
  EXPECT_NEAR(ha.predict(0, 32, 4), 70.0 / 3.0, 1e-12);  // unseen day: slot mean
  EXPECT_NEAR(ha.predict(0, 50, 2), 77.0 / 4.0, 1e-12);  // unseen slot: lot mean

  PreparedSeries shuffled = s;
  shuffled.raw = {7, 40, 20, 10};
  shuffled.slot = {36, 32, 32, 32};
  shuffled.day = {0, 1, 0, 0};
  const HistoricalAverage hb(shuffled, 0, 4);
  for (std::size_t slot : {32u, 36u, 50u})
    for (std::size_t day = 0; day < 7; ++day) EXPECT_EQ(ha.predict(0, slot, day), hb.predict(0, slot, day));

  PreparedSeries empty = s;
  empty.observed = {0, 0, 0, 0};
  EXPECT_THROW(HistoricalAverage(empty, 0, 4), DataError);
}

TEST(Var, RecoversUnivariateCoefficient) {
  std::vector<double> x{8.0};
  for (int t = 1; t < 60; ++t) x.push_back(0.5 * x.back());
  const VarModel var(x, 1, 0, x.size(), 1, 0.0);
  EXPECT_NEAR(var.coefficients(1)[0], 0.5, 1e-6);
  EXPECT_NEAR(var.intercept()[0], 0.0, 1e-6);
  const auto f = var.forecast(std::vector<double>{4.0}, 3);
  EXPECT_NEAR(f[2], 0.5, 1e-5);
}

TEST(Var, WhiteNoiseGivesNearZeroCoefficients) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t steps = 4000;
  std::vector<double> x(steps * 2);
  for (double& v : x) v = 3.0 + noise(rng);
  const VarModel var(x, 2, 0, steps, 2);
  const double bound = 3.0 / std::sqrt(static_cast<double>(steps));
  for (std::size_t i = 1; i <= 2; ++i)
    for (double a : var.coefficients(i)) EXPECT_LT(std::abs(a), bound);
  double mean0 = 0.0;
  for (std::size_t t = 0; t < steps; ++t) mean0 += x[t * 2] / static_cast<double>(steps);
  const auto f = var.forecast(std::span<const double>(x.data(), 4), 10);
  EXPECT_NEAR(f[18], mean0, 0.1);
}

TEST(Var, PersistenceFixtureGivesIdentity) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> step(0.0, 1.0);
  std::vector<double> x{0.0, 10.0, -5.0};
  for (int t = 1; t < 3000; ++t) {
    for (std::size_t j = 0; j < 3; ++j) x.push_back(x[x.size() - 3] + step(rng));
  }
  const VarModel var(x, 3, 0, 3000, 1);
  const auto& a = var.coefficients(1);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(a[r * 3 + c], r == c ? 1.0 : 0.0, 0.02);
}

TEST(Var, GuardsAndErrors) {
  std::vector<double> x(10 * 501, 1.0);
  EXPECT_THROW(VarModel(x, 501, 0, 10, 4), DataError);
  std::vector<double> y(20, 1.0);
  EXPECT_THROW(VarModel(y, 1, 0, 3, 4), DataError);
  EXPECT_THROW(VarModel(y, 1, 0, 20, 0), DataError);
}

TEST(Train, LossDecreasesAndLrFollowsSchedule) {
  const SynthData s = synth_generate(8, 7, 3);
  const PreparedData d = split_and_window(s.frame, s.features, s.lots, 12, 12);
  DeepPA model(small_config(d), 1);
  TrainConfig tc;
  tc.max_epochs = 5;
  tc.lr_halving_period = 2;
  tc.seed = 2;
  const TrainState state = train(model, d, tc);
  ASSERT_EQ(state.log.size(), 5u);
  EXPECT_GT(state.log[0].train_mae, state.log[1].train_mae);
  EXPECT_GT(state.log[1].train_mae, state.log[2].train_mae);
  for (const auto& e : state.log) {
    EXPECT_EQ(e.lr, lr_schedule(e.epoch, 1e-3, 2));
    EXPECT_TRUE(std::isfinite(e.val_mae));
    EXPECT_GE(e.seconds, 0.0);
  }
  EXPECT_EQ(state.best_val, state.log[state.best_epoch].val_mae);
  const double val_now = evaluate(predict_windows(model, d, d.val)).average().mae;
  EXPECT_EQ(val_now, state.best_val);
}

TEST(Train, DeterministicAndResumable) {
  const PreparedData d = small_data();
  const TrainConfig tc = quick_train(3);
  DeepPA a(small_config(d), 4);
  const TrainState sa = train(a, d, tc);
  DeepPA b(small_config(d), 4);
  const TrainState sb = train(b, d, tc);
  ASSERT_EQ(sa.log.size(), sb.log.size());
  for (std::size_t e = 0; e < sa.log.size(); ++e) {
    EXPECT_EQ(sa.log[e].train_mae, sb.log[e].train_mae);
    EXPECT_EQ(sa.log[e].val_mae, sb.log[e].val_mae);
  }

  // Two epochs, then a third from a copied state, against three straight.
  DeepPA c(small_config(d), 4);
  TrainState sc;
  train_epoch(c, d, tc, sc);
  train_epoch(c, d, tc, sc);
  DeepPA resumed(small_config(d), c.params().clone());
  TrainState copy = sc;
  copy.best = sc.best.clone();
  const EpochLog third = train_epoch(resumed, d, tc, copy);
  EXPECT_EQ(third.train_mae, sa.log[2].train_mae);
  EXPECT_EQ(third.val_mae, sa.log[2].val_mae);
}

TEST(Train, EarlyStoppingHonoursPatience) {
  const PreparedData d = small_data();
  TrainConfig tc = quick_train(6);
  tc.patience = 2;
  DeepPA m(small_config(d), 6);
  TrainState unbeatable;
  unbeatable.best_val = 0.0;
  const TrainState s = train(m, d, tc, unbeatable);
  EXPECT_EQ(s.log.size(), 2u);
  EXPECT_EQ(s.epochs_since_best, 2u);
}

TEST(Train, DivergenceNamesEpochAndBatch) {
  const PreparedData d = small_data();
  DeepPA m(small_config(d), 7);
  m.params().at("predictor.bias").mutable_data()[0] = std::nan("");
  TrainState s;
  try {
    train_epoch(m, d, quick_train(1), s);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0 batch 0"), std::string::npos) << e.what();
  }
}

TEST(EpochLog, JsonLineFields) {
  EpochLog e{3, 0.5, 12.25, 5e-4, 1.5};
  EXPECT_EQ(e.to_json(), R"({"epoch":3,"train_mae":0.5,"val_mae":12.25,"lr":0.0005,"seconds":1.5})");
}
