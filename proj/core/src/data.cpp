#include "stpark/data.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "stpark/errors.hpp"

namespace stpark {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t comma = line.find(',', pos);
    out.push_back(trim(line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos)));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

[[noreturn]] void fail_at(const std::filesystem::path& path, std::size_t line, const std::string& what) {
  throw DataError(path.filename().string() + ":" + std::to_string(line) + ": " + what);
}

double parse_double(std::string_view s, const std::filesystem::path& path, std::size_t line, const char* field) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    fail_at(path, line, std::string("bad ") + field + " '" + std::string(s) + "'");
  }
  return v;
}

std::size_t parse_index(std::string_view s, const std::filesystem::path& path, std::size_t line, const char* field) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    fail_at(path, line, std::string("bad ") + field + " '" + std::string(s) + "'");
  }
  return v;
}

int parse_digits(std::string_view text, std::size_t pos, std::size_t count) {
  if (pos + count > text.size()) throw DataError("bad timestamp '" + std::string(text) + "'");
  int v = 0;
  for (std::size_t i = pos; i < pos + count; ++i) {
    const char c = text[i];
    if (c < '0' || c > '9') throw DataError("bad timestamp '" + std::string(text) + "'");
    v = v * 10 + (c - '0');
  }
  return v;
}

void expect_char(std::string_view text, std::size_t pos, std::string_view allowed) {
  if (pos >= text.size() || allowed.find(text[pos]) == std::string_view::npos) {
    throw DataError("bad timestamp '" + std::string(text) + "'");
  }
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

struct Reader {
  std::filesystem::path path;
  std::ifstream in;
  std::size_t line_no = 0;
  std::string line;

  explicit Reader(const std::filesystem::path& p) : path(p), in(p) {
    if (!in) throw DataError("cannot open " + p.string());
  }

  void header(const std::vector<std::string_view>& want) {
    if (!next()) fail_at(path, 1, "missing header");
    const auto fields = split_fields(line);
    if (fields.size() != want.size() || !std::equal(fields.begin(), fields.end(), want.begin())) {
      std::string expected;
      for (auto w : want) expected += (expected.empty() ? "" : ",") + std::string(w);
      fail_at(path, line_no, "expected header '" + expected + "'");
    }
  }

  bool next() {
    while (std::getline(in, line)) {
      ++line_no;
      if (!trim(line).empty()) return true;
    }
    return false;
  }

  std::vector<std::string_view> fields(std::size_t count) {
    auto f = split_fields(line);
    if (f.size() != count) {
      fail_at(path, line_no, "expected " + std::to_string(count) + " fields, got " + std::to_string(f.size()));
    }
    return f;
  }
};

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(17);
  return out;
}

std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

Timestamp parse_iso8601(std::string_view text) {
  text = trim(text);
  const int year = parse_digits(text, 0, 4);
  expect_char(text, 4, "-");
  const int month = parse_digits(text, 5, 2);
  expect_char(text, 7, "-");
  const int dom = parse_digits(text, 8, 2);
  expect_char(text, 10, "T ");
  const int hour = parse_digits(text, 11, 2);
  expect_char(text, 13, ":");
  const int minute = parse_digits(text, 14, 2);
  expect_char(text, 16, ":");
  const int second = parse_digits(text, 17, 2);
  std::size_t pos = 19;
  if (pos < text.size() && text[pos] == '.') {
    ++pos;
    while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') ++pos;
  }
  if (pos >= text.size()) throw DataError("timestamp without timezone '" + std::string(text) + "'");
  int offset = 0;
  if (text[pos] == 'Z') {
    ++pos;
  } else {
    expect_char(text, pos, "+-");
    const int sign = text[pos] == '-' ? -1 : 1;
    const int oh = parse_digits(text, pos + 1, 2);
    std::size_t mpos = pos + 3;
    if (mpos < text.size() && text[mpos] == ':') ++mpos;
    const int om = parse_digits(text, mpos, 2);
    offset = sign * (oh * 60 + om);
    pos = mpos + 2;
  }
  if (pos != text.size()) throw DataError("trailing characters in timestamp '" + std::string(text) + "'");

  using namespace std::chrono;
  const year_month_day ymd{std::chrono::year{year}, std::chrono::month{static_cast<unsigned>(month)},
                           std::chrono::day{static_cast<unsigned>(dom)}};
  if (!ymd.ok() || hour > 23 || minute > 59 || second > 60) {
    throw DataError("invalid date or time '" + std::string(text) + "'");
  }
  const std::int64_t days = sys_days(ymd).time_since_epoch().count();
  const std::int64_t local = days * 86400 + hour * 3600 + minute * 60 + second;
  return {local - offset * 60, offset};
}

std::string format_iso8601(std::int64_t epoch, int offset_minutes) {
  using namespace std::chrono;
  const std::int64_t local = epoch + offset_minutes * 60;
  const std::int64_t days = floor_div(local, 86400);
  const std::int64_t secs = local - days * 86400;
  const year_month_day ymd{sys_days{std::chrono::days{days}}};
  char buf[40];
  const int off = std::abs(offset_minutes);
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02d:%02d:%02d%c%02d:%02d", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), static_cast<int>(secs / 3600),
                static_cast<int>(secs / 60 % 60), static_cast<int>(secs % 60), offset_minutes < 0 ? '-' : '+',
                off / 60, off % 60);
  return buf;
}

double SeriesFrame::missing_rate(std::size_t n) const {
  if (steps() == 0) return 1.0;
  std::size_t missing = 0;
  for (std::size_t t = 0; t < steps(); ++t) missing += is_observed(t, n) ? 0 : 1;
  return static_cast<double>(missing) / static_cast<double>(steps());
}

void SeriesFrame::validate() const {
  if (values.size() != steps() * lots() || observed.size() != values.size()) {
    throw DataError("series frame: value/mask size does not match " + std::to_string(steps()) + "x" +
                    std::to_string(lots()));
  }
  for (std::size_t t = 1; t < steps(); ++t) {
    if (timestamps[t] - timestamps[t - 1] != kSlotSeconds) {
      throw DataError("series frame: step " + std::to_string(t) + " is not 900 s after its predecessor");
    }
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (observed[i] && !(values[i] >= 0.0)) throw DataError("series frame: negative availability");
  }
}

SeriesFrame load_pa_csv(const std::filesystem::path& path) {
  Reader r(path);
  r.header({"timestamp", "lot_id", "available"});

  struct Reading {
    std::int64_t epoch;
    double value;
  };
  std::map<std::string, std::map<std::int64_t, Reading>> by_lot;  // lot -> slot -> last reading
  std::map<std::string, std::int64_t> last_seen;
  std::size_t duplicates = 0;
  std::int64_t lo = 0;
  std::int64_t hi = 0;
  bool any = false;
  int offset = 0;

  while (r.next()) {
    const auto f = r.fields(3);
    Timestamp ts;
    try {
      ts = parse_iso8601(f[0]);
    } catch (const DataError& e) {
      fail_at(path, r.line_no, e.what());
    }
    const std::string lot(f[1]);
    if (lot.empty()) fail_at(path, r.line_no, "empty lot_id");
    const double value = parse_double(f[2], path, r.line_no, "available");
    if (value < 0.0) fail_at(path, r.line_no, "negative availability");

    auto seen = last_seen.find(lot);
    if (seen != last_seen.end() && ts.epoch < seen->second) {
      fail_at(path, r.line_no, "timestamps for lot " + lot + " go backwards");
    }
    last_seen[lot] = ts.epoch;

    const std::int64_t slot = floor_div(ts.epoch, kSlotSeconds) * kSlotSeconds;
    auto& slots = by_lot[lot];
    auto it = slots.find(slot);
    if (it != slots.end()) {
      if (it->second.epoch == ts.epoch) ++duplicates;
      it->second = {ts.epoch, value};
    } else {
      slots.emplace(slot, Reading{ts.epoch, value});
    }
    if (!any) {
      lo = hi = slot;
      offset = ts.offset_minutes;
      any = true;
    }
    lo = std::min(lo, slot);
    hi = std::max(hi, slot);
  }
  if (!any) throw DataError(path.filename().string() + ": no data rows");

  SeriesFrame frame;
  frame.offset_minutes = offset;
  frame.duplicate_rows = duplicates;
  for (std::int64_t s = lo; s <= hi; s += kSlotSeconds) frame.timestamps.push_back(s);
  for (const auto& [lot, slots] : by_lot) frame.lot_ids.push_back(lot);
  const std::size_t n = frame.lots();
  frame.values.assign(frame.steps() * n, 0.0);
  frame.observed.assign(frame.steps() * n, 0);
  std::size_t col = 0;
  for (const auto& [lot, slots] : by_lot) {
    for (const auto& [slot, reading] : slots) {
      const auto t = static_cast<std::size_t>((slot - lo) / kSlotSeconds);
      frame.values[t * n + col] = reading.value;
      frame.observed[t * n + col] = 1;
    }
    ++col;
  }
  frame.validate();
  return frame;
}

std::vector<LotRecord> load_lots_csv(const std::filesystem::path& path) {
  Reader r(path);
  r.header({"lot_id", "lat", "lon", "planning_area", "land_use", "road_density"});
  std::vector<LotRecord> lots;
  std::map<std::string, std::size_t> seen;
  while (r.next()) {
    const auto f = r.fields(6);
    LotRecord lot;
    lot.lot_id = std::string(f[0]);
    if (lot.lot_id.empty()) fail_at(path, r.line_no, "empty lot_id");
    if (!seen.emplace(lot.lot_id, r.line_no).second) fail_at(path, r.line_no, "duplicate lot " + lot.lot_id);
    lot.latitude = parse_double(f[1], path, r.line_no, "lat");
    lot.longitude = parse_double(f[2], path, r.line_no, "lon");
    if (std::abs(lot.latitude) > 90.0) fail_at(path, r.line_no, "latitude out of range");
    if (std::abs(lot.longitude) > 180.0) fail_at(path, r.line_no, "longitude out of range");
    lot.planning_area = parse_index(f[3], path, r.line_no, "planning_area");
    lot.land_use = parse_index(f[4], path, r.line_no, "land_use");
    lot.road_density = parse_double(f[5], path, r.line_no, "road_density");
    lots.push_back(std::move(lot));
  }
  return lots;
}

std::vector<WeatherRow> load_weather_csv(const std::filesystem::path& path) {
  Reader r(path);
  r.header({"timestamp", "temperature", "humidity", "wind_speed"});
  std::vector<WeatherRow> rows;
  while (r.next()) {
    const auto f = r.fields(4);
    WeatherRow row;
    try {
      row.epoch = parse_iso8601(f[0]).epoch;
    } catch (const DataError& e) {
      fail_at(path, r.line_no, e.what());
    }
    if (!rows.empty() && row.epoch < rows.back().epoch) fail_at(path, r.line_no, "timestamps go backwards");
    row.temperature = parse_double(f[1], path, r.line_no, "temperature");
    row.humidity = parse_double(f[2], path, r.line_no, "humidity");
    row.wind_speed = parse_double(f[3], path, r.line_no, "wind_speed");
    rows.push_back(row);
  }
  return rows;
}

TemporalFeatureFrame build_temporal_frame(const SeriesFrame& frame, std::span<const WeatherRow> weather) {
  TemporalFeatureFrame out;
  const std::size_t steps = frame.steps();
  for (std::int64_t ts : frame.timestamps) {
    const std::int64_t local = ts + frame.offset_minutes * 60;
    const std::int64_t days = floor_div(local, 86400);
    out.slot.push_back(static_cast<std::size_t>((local - days * 86400) / kSlotSeconds));
    out.day.push_back(static_cast<std::size_t>(((days + 3) % 7 + 7) % 7));  // 1970-01-01 was a Thursday
  }
  out.temperature.assign(steps, 0.0);
  out.humidity.assign(steps, 0.0);
  out.wind_speed.assign(steps, 0.0);
  if (steps == 0 || weather.empty()) return out;

  std::vector<std::uint8_t> have(steps, 0);
  const std::int64_t first = frame.timestamps.front();
  for (const auto& row : weather) {
    const std::int64_t slot = floor_div(row.epoch, kSlotSeconds) * kSlotSeconds;
    if (slot < first) continue;
    const auto t = static_cast<std::size_t>((slot - first) / kSlotSeconds);
    if (t >= steps) continue;
    out.temperature[t] = row.temperature;
    out.humidity[t] = row.humidity;
    out.wind_speed[t] = row.wind_speed;
    have[t] = 1;
  }
  const auto first_have = std::find(have.begin(), have.end(), 1);
  if (first_have == have.end()) return out;
  std::size_t src = static_cast<std::size_t>(first_have - have.begin());
  for (std::size_t t = 0; t < steps; ++t) {
    if (have[t]) {
      src = t;
    } else {
      out.temperature[t] = out.temperature[src];
      out.humidity[t] = out.humidity[src];
      out.wind_speed[t] = out.wind_speed[src];
    }
  }
  return out;
}

void write_pa_csv(const std::filesystem::path& path, const SeriesFrame& frame) {
  auto out = open_out(path);
  out << "timestamp,lot_id,available\n";
  for (std::size_t t = 0; t < frame.steps(); ++t) {
    const std::string ts = format_iso8601(frame.timestamps[t], frame.offset_minutes);
    for (std::size_t n = 0; n < frame.lots(); ++n) {
      if (!frame.is_observed(t, n)) continue;
      out << ts << ',' << frame.lot_ids[n] << ',' << format_number(frame.value(t, n)) << '\n';
    }
  }
  if (!out) throw DataError("failed writing " + path.string());
}

void write_lots_csv(const std::filesystem::path& path, std::span<const LotRecord> lots) {
  auto out = open_out(path);
  out << "lot_id,lat,lon,planning_area,land_use,road_density\n";
  for (const auto& lot : lots) {
    out << lot.lot_id << ',' << format_number(lot.latitude) << ',' << format_number(lot.longitude) << ','
        << lot.planning_area << ',' << lot.land_use << ',' << format_number(lot.road_density) << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

void write_weather_csv(const std::filesystem::path& path, const SeriesFrame& frame,
                       const TemporalFeatureFrame& features) {
  auto out = open_out(path);
  out << "timestamp,temperature,humidity,wind_speed\n";
  for (std::size_t t = 0; t < frame.steps(); ++t) {
    out << format_iso8601(frame.timestamps[t], frame.offset_minutes) << ',' << format_number(features.temperature[t])
        << ',' << format_number(features.humidity[t]) << ',' << format_number(features.wind_speed[t]) << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

SplitBoundaries split_boundaries(std::size_t steps, std::size_t train_parts, std::size_t val_parts,
                                 std::size_t test_parts) {
  const std::size_t parts = train_parts + val_parts + test_parts;
  if (train_parts == 0 || parts == 0) throw DataError("split ratios must be positive");
  SplitBoundaries b;
  b.total = steps;
  b.train_end = steps * train_parts / parts;
  b.val_end = steps * (train_parts + val_parts) / parts;
  return b;
}

double lot_kl_divergence(const SeriesFrame& frame, std::size_t lot, const SplitBoundaries& split,
                         const FilterOptions& options) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (std::size_t t = 0; t < frame.steps(); ++t) {
    if (!frame.is_observed(t, lot)) continue;
    lo = std::min(lo, frame.value(t, lot));
    hi = std::max(hi, frame.value(t, lot));
  }
  const std::size_t bins = options.bins;
  std::vector<double> p(bins, 0.0);
  std::vector<double> q(bins, 0.0);
  auto bin_of = [&](double v) {
    if (!(hi > lo)) return std::size_t{0};
    const auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
    return std::min(b, bins - 1);
  };
  double np = 0.0;
  double nq = 0.0;
  for (std::size_t t = 0; t < split.train_end; ++t) {
    if (frame.is_observed(t, lot)) {
      p[bin_of(frame.value(t, lot))] += 1.0;
      np += 1.0;
    }
  }
  for (std::size_t t = split.val_end; t < split.total; ++t) {
    if (frame.is_observed(t, lot)) {
      q[bin_of(frame.value(t, lot))] += 1.0;
      nq += 1.0;
    }
  }
  if (np == 0.0 || nq == 0.0) return std::numeric_limits<double>::infinity();
  const double eps = options.smoothing;
  const double z = 1.0 + eps * static_cast<double>(bins);
  double kl = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    const double pb = (p[b] / np + eps) / z;
    const double qb = (q[b] / nq + eps) / z;
    kl += qb * std::log(qb / pb);
  }
  return std::max(kl, 0.0);
}

SeriesFrame filter_lots(const SeriesFrame& frame, const SplitBoundaries& split, const FilterOptions& options) {
  if (split.total != frame.steps()) throw DataError("filter_lots: split does not match frame length");
  std::vector<std::size_t> keep;
  for (std::size_t n = 0; n < frame.lots(); ++n) {
    if (frame.missing_rate(n) >= options.max_missing) continue;
    if (lot_kl_divergence(frame, n, split, options) > options.kl_threshold) continue;
    keep.push_back(n);
  }
  if (keep.empty()) throw DataError("filter_lots: every lot was filtered out");

  SeriesFrame out;
  out.timestamps = frame.timestamps;
  out.offset_minutes = frame.offset_minutes;
  out.duplicate_rows = frame.duplicate_rows;
  for (std::size_t n : keep) out.lot_ids.push_back(frame.lot_ids[n]);
  out.values.reserve(frame.steps() * keep.size());
  out.observed.reserve(frame.steps() * keep.size());
  for (std::size_t t = 0; t < frame.steps(); ++t) {
    for (std::size_t n : keep) {
      out.values.push_back(frame.value(t, n));
      out.observed.push_back(frame.observed[t * frame.lots() + n]);
    }
  }
  return out;
}

SeriesFrame impute_missing(const SeriesFrame& frame) {
  SeriesFrame out = frame;
  const std::size_t n_lots = frame.lots();
  for (std::size_t n = 0; n < n_lots; ++n) {
    std::size_t first = frame.steps();
    for (std::size_t t = 0; t < frame.steps(); ++t) {
      if (frame.is_observed(t, n)) {
        first = t;
        break;
      }
    }
    if (first == frame.steps()) throw DataError("impute_missing: lot " + frame.lot_ids[n] + " has no observations");
    double carry = frame.value(first, n);
    for (std::size_t t = 0; t < frame.steps(); ++t) {
      if (frame.is_observed(t, n)) {
        carry = frame.value(t, n);
      } else {
        out.values[t * n_lots + n] = carry;
      }
    }
  }
  return out;
}

NormStats lot_stats(const SeriesFrame& frame, std::size_t begin, std::size_t end) {
  NormStats s;
  const std::size_t n_lots = frame.lots();
  s.mean.assign(n_lots, 0.0);
  s.std.assign(n_lots, 1.0);
  for (std::size_t n = 0; n < n_lots; ++n) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t t = begin; t < end; ++t) {
      if (frame.is_observed(t, n)) {
        sum += frame.value(t, n);
        ++count;
      }
    }
    if (count == 0) throw DataError("lot " + frame.lot_ids[n] + " has no observations in the training range");
    const double mean = sum / static_cast<double>(count);
    double var = 0.0;
    for (std::size_t t = begin; t < end; ++t) {
      if (frame.is_observed(t, n)) var += (frame.value(t, n) - mean) * (frame.value(t, n) - mean);
    }
    const double sd = std::sqrt(var / static_cast<double>(count));
    s.mean[n] = mean;
    s.std[n] = sd > 1e-12 ? sd : 1.0;
  }
  return s;
}

WindowedDataset::WindowedDataset(std::shared_ptr<const PreparedSeries> series, std::size_t begin, std::size_t end,
                                 std::size_t history, std::size_t horizon)
    : series_(std::move(series)), begin_(begin), end_(end), history_(history), horizon_(horizon) {
  const std::size_t span = history + horizon;
  if (end < begin || end - begin < span) {
    throw DataError("split [" + std::to_string(begin) + ", " + std::to_string(end) + ") is too short for a window of " +
                    std::to_string(span) + " steps");
  }
  windows_ = end - begin - span + 1;
}

Batch WindowedDataset::batch(std::span<const std::size_t> windows) const {
  const std::size_t b = windows.size();
  const std::size_t n = series_->lots;
  const std::size_t c = kTemporalFeatures;
  std::vector<double> x(b * history_ * n);
  std::vector<double> f(b * history_ * c);
  std::vector<double> y(b * horizon_ * n);
  std::vector<double> m(b * horizon_ * n);
  Batch out;
  for (std::size_t i = 0; i < b; ++i) {
    if (windows[i] >= windows_) throw DimensionError("window index out of range");
    const std::size_t s = start(windows[i]);
    out.starts.push_back(s);
    std::copy_n(series_->values.begin() + static_cast<std::ptrdiff_t>(s * n), history_ * n,
                x.begin() + static_cast<std::ptrdiff_t>(i * history_ * n));
    std::copy_n(series_->features.begin() + static_cast<std::ptrdiff_t>(s * c), history_ * c,
                f.begin() + static_cast<std::ptrdiff_t>(i * history_ * c));
    const std::size_t ts = s + history_;
    std::copy_n(series_->values.begin() + static_cast<std::ptrdiff_t>(ts * n), horizon_ * n,
                y.begin() + static_cast<std::ptrdiff_t>(i * horizon_ * n));
    for (std::size_t k = 0; k < horizon_ * n; ++k) m[i * horizon_ * n + k] = series_->observed[ts * n + k];
  }
  out.x = Tensor::from({b, history_, n}, std::move(x));
  out.temporal = Tensor::from({b, history_, c}, std::move(f));
  out.y = Tensor::from({b, horizon_, n}, std::move(y));
  out.mask = Tensor::from({b, horizon_, n}, std::move(m));
  return out;
}

SpatialInputs build_spatial_inputs(std::span<const std::string> lot_ids, std::span<const LotRecord> lots,
                                   std::size_t* planning_vocab, std::size_t* land_use_vocab) {
  std::map<std::string, const LotRecord*> index;
  for (const auto& lot : lots) index[lot.lot_id] = &lot;
  std::vector<const LotRecord*> rows;
  for (const auto& id : lot_ids) {
    auto it = index.find(id);
    if (it == index.end()) throw DataError("lot " + id + " has no entry in the lots table");
    rows.push_back(it->second);
  }
  const std::size_t n = rows.size();
  SpatialInputs s;
  std::vector<double> numeric(n * 3);
  auto scaled = [&](auto get, std::size_t col) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto* r : rows) {
      lo = std::min(lo, get(*r));
      hi = std::max(hi, get(*r));
    }
    for (std::size_t i = 0; i < n; ++i) numeric[i * 3 + col] = hi > lo ? (get(*rows[i]) - lo) / (hi - lo) : 0.0;
  };
  scaled([](const LotRecord& r) { return r.latitude; }, 0);
  scaled([](const LotRecord& r) { return r.longitude; }, 1);
  scaled([](const LotRecord& r) { return r.road_density; }, 2);
  s.numeric = Tensor::from({n, 3}, std::move(numeric));
  std::size_t pv = 1;
  std::size_t lv = 1;
  for (const auto* r : rows) {
    s.planning_ids.push_back(r->planning_area);
    s.land_use_ids.push_back(r->land_use);
  }
  for (const auto& lot : lots) {
    pv = std::max(pv, lot.planning_area + 1);
    lv = std::max(lv, lot.land_use + 1);
  }
  if (planning_vocab) *planning_vocab = pv;
  if (land_use_vocab) *land_use_vocab = lv;
  return s;
}

namespace {

WeatherStats fit_weather(const TemporalFeatureFrame& features, std::size_t end) {
  WeatherStats w;
  const std::vector<double>* channels[3] = {&features.temperature, &features.humidity, &features.wind_speed};
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0.0;
    for (std::size_t t = 0; t < end; ++t) sum += (*channels[c])[t];
    const double mean = end ? sum / static_cast<double>(end) : 0.0;
    double var = 0.0;
    for (std::size_t t = 0; t < end; ++t) var += ((*channels[c])[t] - mean) * ((*channels[c])[t] - mean);
    const double sd = end ? std::sqrt(var / static_cast<double>(end)) : 0.0;
    w.mean[c] = mean;
    w.std[c] = sd > 1e-12 ? sd : 1.0;
  }
  return w;
}

PreparedData assemble(const SeriesFrame& frame, const TemporalFeatureFrame& features, std::span<const LotRecord> lots,
                      const NormStats& stats, const WeatherStats& weather, const SplitBoundaries& boundaries) {
  PreparedData d;
  d.lot_ids = frame.lot_ids;
  d.boundaries = boundaries;
  d.stats = stats;
  d.weather = weather;
  d.first_timestamp = frame.timestamps.empty() ? 0 : frame.timestamps.front();
  d.offset_minutes = frame.offset_minutes;
  d.spatial = build_spatial_inputs(frame.lot_ids, lots, &d.planning_vocab, &d.land_use_vocab);
  d.series = build_prepared_series(frame, features, stats, weather);
  return d;
}

}  // namespace

std::shared_ptr<const PreparedSeries> build_prepared_series(const SeriesFrame& frame,
                                                            const TemporalFeatureFrame& features,
                                                            const NormStats& stats, const WeatherStats& weather) {
  frame.validate();
  if (features.steps() != frame.steps()) throw DataError("temporal features do not match the series length");
  if (stats.mean.size() != frame.lots() || stats.std.size() != frame.lots()) {
    throw DataError("normalization statistics cover " + std::to_string(stats.mean.size()) + " lots, frame has " +
                    std::to_string(frame.lots()));
  }
  const std::vector<double>* channels[3] = {&features.temperature, &features.humidity, &features.wind_speed};
  auto series = std::make_shared<PreparedSeries>();
  const std::size_t steps = frame.steps();
  const std::size_t n = frame.lots();
  series->lots = n;
  series->raw = frame.values;
  series->observed = frame.observed;
  series->values.resize(steps * n);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < n; ++i) series->values[t * n + i] = stats.normalize(frame.value(t, i), i);
  series->slot = features.slot;
  series->day = features.day;
  series->features.resize(steps * kTemporalFeatures);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t t = 0; t < steps; ++t) {
    double* row = series->features.data() + t * kTemporalFeatures;
    const double tod = two_pi * static_cast<double>(features.slot[t]) / static_cast<double>(kSlotsPerDay);
    const double dow = two_pi * static_cast<double>(features.day[t]) / 7.0;
    row[0] = std::sin(tod);
    row[1] = std::cos(tod);
    row[2] = std::sin(dow);
    row[3] = std::cos(dow);
    row[4] = features.day[t] >= 5 ? 1.0 : 0.0;
    for (std::size_t c = 0; c < 3; ++c) row[5 + c] = ((*channels[c])[t] - weather.mean[c]) / weather.std[c];
  }
  return series;
}

PreparedData split_and_window(const SeriesFrame& frame, const TemporalFeatureFrame& features,
                              std::span<const LotRecord> lots, std::size_t history, std::size_t horizon,
                              std::size_t train_parts, std::size_t val_parts, std::size_t test_parts) {
  frame.validate();
  if (features.steps() != frame.steps()) throw DataError("temporal features do not match the series length");
  const SplitBoundaries boundaries = split_boundaries(frame.steps(), train_parts, val_parts, test_parts);
  PreparedData d = assemble(frame, features, lots, lot_stats(frame, 0, boundaries.train_end),
                            fit_weather(features, boundaries.train_end), boundaries);
  d.train = WindowedDataset(d.series, 0, d.boundaries.train_end, history, horizon);
  d.val = WindowedDataset(d.series, d.boundaries.train_end, d.boundaries.val_end, history, horizon);
  d.test = WindowedDataset(d.series, d.boundaries.val_end, d.boundaries.total, history, horizon);
  return d;
}

SeriesFrame select_lots(const SeriesFrame& frame, std::span<const std::string> lot_ids) {
  std::vector<std::size_t> columns;
  for (const auto& id : lot_ids) {
    auto it = std::find(frame.lot_ids.begin(), frame.lot_ids.end(), id);
    if (it == frame.lot_ids.end()) throw DataError("lot " + id + " is not in the data");
    columns.push_back(static_cast<std::size_t>(it - frame.lot_ids.begin()));
  }
  SeriesFrame out;
  out.timestamps = frame.timestamps;
  out.offset_minutes = frame.offset_minutes;
  out.lot_ids.assign(lot_ids.begin(), lot_ids.end());
  out.duplicate_rows = frame.duplicate_rows;
  const std::size_t n = columns.size();
  out.values.resize(frame.steps() * n);
  out.observed.resize(frame.steps() * n);
  for (std::size_t t = 0; t < frame.steps(); ++t) {
    for (std::size_t j = 0; j < n; ++j) {
      out.values[t * n + j] = frame.value(t, columns[j]);
      out.observed[t * n + j] = frame.observed[t * frame.lots() + columns[j]];
    }
  }
  return out;
}

PreparedData prepare_with_stats(const RawDataset& raw, std::span<const std::string> lot_ids, const NormStats& stats,
                                const WeatherStats& weather, std::size_t history, std::size_t horizon) {
  const SeriesFrame kept = impute_missing(select_lots(raw.frame, lot_ids));
  const TemporalFeatureFrame features = build_temporal_frame(kept, raw.weather);
  PreparedData d = assemble(kept, features, raw.lots, stats, weather, split_boundaries(kept.steps()));
  const std::size_t span = history + horizon;
  // Splits too short for a window stay empty; the series is still usable.
  auto make = [&](std::size_t begin, std::size_t end) {
    return end - begin >= span ? WindowedDataset(d.series, begin, end, history, horizon) : WindowedDataset();
  };
  d.train = make(0, d.boundaries.train_end);
  d.val = make(d.boundaries.train_end, d.boundaries.val_end);
  d.test = make(d.boundaries.val_end, d.boundaries.total);
  return d;
}

std::string split_manifest(const PreparedData& data) {
  nlohmann::ordered_json j;
  j["total_steps"] = data.boundaries.total;
  j["train"] = {0, data.boundaries.train_end};
  j["val"] = {data.boundaries.train_end, data.boundaries.val_end};
  j["test"] = {data.boundaries.val_end, data.boundaries.total};
  j["history"] = data.train.history();
  j["horizon"] = data.train.horizon();
  j["first_timestamp"] = format_iso8601(data.first_timestamp, data.offset_minutes);
  j["lots"] = data.lot_ids;
  j["mean"] = data.stats.mean;
  j["std"] = data.stats.std;
  j["weather_mean"] = {data.weather.mean[0], data.weather.mean[1], data.weather.mean[2]};
  j["weather_std"] = {data.weather.std[0], data.weather.std[1], data.weather.std[2]};
  return j.dump(2);
}

RawDataset load_dataset_dir(const std::filesystem::path& dir) {
  RawDataset raw;
  raw.frame = load_pa_csv(dir / "pa.csv");
  raw.lots = load_lots_csv(dir / "lots.csv");
  if (std::filesystem::exists(dir / "weather.csv")) raw.weather = load_weather_csv(dir / "weather.csv");
  return raw;
}

PreparedData prepare_dataset(const RawDataset& raw, std::size_t history, std::size_t horizon,
                             const FilterOptions& filter) {
  const SplitBoundaries split = split_boundaries(raw.frame.steps());
  const SeriesFrame kept = impute_missing(filter_lots(raw.frame, split, filter));
  const TemporalFeatureFrame features = build_temporal_frame(kept, raw.weather);
  return split_and_window(kept, features, raw.lots, history, horizon);
}

}  // namespace stpark
