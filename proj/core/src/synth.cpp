#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "stpark/data.hpp"
#include "stpark/errors.hpp"

namespace stpark {

std::vector<double> ring_diffusion_step(std::span<const double> x, double kappa) {
  const std::size_t n = x.size();
  std::vector<double> out(x.begin(), x.end());
  if (n < 2) return out;
  if (n == 2) {
    out[0] += kappa * (x[1] - x[0]);
    out[1] += kappa * (x[0] - x[1]);
    return out;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double left = x[(i + n - 1) % n];
    const double right = x[(i + 1) % n];
    out[i] += kappa * ((left - x[i]) + (right - x[i]));
  }
  return out;
}

SynthData synth_generate(std::size_t n_lots, std::size_t n_days, std::uint64_t seed, const SynthOptions& options) {
  if (n_lots < 2) throw DataError("synth_generate: need at least two lots");
  if (n_days == 0) throw DataError("synth_generate: need at least one day");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  constexpr double two_pi = 2.0 * std::numbers::pi;

  constexpr double kAmplitude[3] = {0.35, 0.25, 0.15};
  constexpr double kWeekend[3] = {0.4, 1.1, 0.7};
  constexpr double kPhase[3] = {0.0, two_pi / 3.0, 2.0 * two_pi / 3.0};

  SynthData out;
  std::vector<double> base(n_lots);
  std::vector<double> phase(n_lots);
  for (std::size_t i = 0; i < n_lots; ++i) {
    LotRecord lot;
    char id[32];
    std::snprintf(id, sizeof(id), "L%03zu", i);
    lot.lot_id = id;
    const double angle = two_pi * static_cast<double>(i) / static_cast<double>(n_lots);
    lot.latitude = 1.35 + 0.05 * std::sin(angle);
    lot.longitude = 103.82 + 0.05 * std::cos(angle);
    lot.land_use = i % 3;
    lot.planning_area = i * 4 / n_lots;
    lot.road_density = 0.2 + 0.8 * unit(rng);
    out.lots.push_back(lot);
    out.capacity.push_back(std::floor(50.0 + 451.0 * unit(rng)));
    base[i] = 0.35 + 0.25 * unit(rng);
    phase[i] = kPhase[lot.land_use] + 0.6 * (unit(rng) - 0.5);
  }

  const std::size_t steps = n_days * kSlotsPerDay;
  SeriesFrame& frame = out.frame;
  frame.offset_minutes = options.offset_minutes;
  for (const auto& lot : out.lots) frame.lot_ids.push_back(lot.lot_id);
  frame.values.assign(steps * n_lots, 0.0);
  frame.observed.assign(steps * n_lots, 1);
  for (std::size_t t = 0; t < steps; ++t) {
    frame.timestamps.push_back(options.start_epoch + static_cast<std::int64_t>(t) * kSlotSeconds);
  }
  out.features = build_temporal_frame(frame, {});

  std::vector<double> deviation(n_lots, 0.0);
  double shock = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t slot = out.features.slot[t];
    const bool weekend = out.features.day[t] >= 5;
    const double tod = two_pi * static_cast<double>(slot) / static_cast<double>(kSlotsPerDay);

    const double eta = normal(rng);
    shock = 0.9 * shock + std::sqrt(1.0 - 0.81) * eta;
    const double diurnal = std::sin(tod - two_pi * 0.375);
    out.features.temperature[t] = 27.0 + 3.0 * diurnal - 1.5 * shock;
    out.features.humidity[t] = 78.0 - 8.0 * diurnal + 6.0 * shock;
    out.features.wind_speed[t] = std::abs(3.0 + 0.8 * shock + 0.3 * normal(rng));

    for (std::size_t i = 0; i < n_lots; ++i) {
      const std::size_t cls = out.lots[i].land_use;
      const double amp = kAmplitude[cls] * (weekend ? kWeekend[cls] : 1.0);
      const double cap = out.capacity[i];
      const double occupied = std::clamp(cap * (base[i] + amp * std::sin(tod + phase[i])) + deviation[i], 0.0, cap);
      frame.values[t * n_lots + i] = std::round(cap - occupied);
    }

    std::vector<double> next = ring_diffusion_step(deviation, options.diffusion);
    for (std::size_t i = 0; i < n_lots; ++i) {
      const double innovation = 0.6 * eta + 0.8 * normal(rng);
      next[i] = options.persistence * next[i] + options.noise * out.capacity[i] * innovation;
    }
    deviation = std::move(next);
  }
  return out;
}

}  // namespace stpark
