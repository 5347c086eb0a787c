#include "stpark/checkpoint.hpp"

#include <openssl/evp.h>
#include <unistd.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "stpark/config.hpp"
#include "stpark/errors.hpp"

namespace stpark {
namespace {

using nlohmann::json;

constexpr std::string_view kMagic = "STPARK-CHECKPOINT\n";

void append_doubles(std::string& out, std::span<const double> values) {
  for (double v : values) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    char bytes[8];
    std::memcpy(bytes, &bits, 8);
    out.append(bytes, 8);
  }
}

std::vector<double> read_doubles(std::string_view payload, std::size_t offset, std::size_t count) {
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, payload.data() + (offset + i) * 8, 8);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

struct PayloadWriter {
  std::string bytes;
  json entries = json::array();
  std::size_t doubles = 0;

  void add(const std::string& group, const std::string& key, const Shape& shape, std::span<const double> values) {
    entries.push_back({{"group", group}, {"key", key}, {"shape", shape}, {"offset", doubles}});
    append_doubles(bytes, values);
    doubles += values.size();
  }
};

[[noreturn]] void bad(const std::string& what) { throw CheckpointError("checkpoint: " + what); }

std::string digest_of(const json& header_without_digest, std::string_view payload) {
  std::string material = header_without_digest.dump();
  material.push_back('\n');
  material.append(payload);
  return sha256_hex(material);
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw CheckpointError("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 15]);
  }
  return out;
}

std::string serialize_checkpoint(Checkpoint& ck) {
  PayloadWriter w;
  for (const auto& [key, t] : ck.params.entries()) w.add("params", key, t.shape(), t.data());
  w.add("stats", "mean", {ck.stats.mean.size()}, ck.stats.mean);
  w.add("stats", "std", {ck.stats.std.size()}, ck.stats.std);
  w.add("weather", "mean", {3}, ck.weather.mean);
  w.add("weather", "std", {3}, ck.weather.std);

  json header;
  header["format_version"] = ck.format_version;
  header["config"] = json::parse(model_config_to_json(ck.config));
  header["lot_ids"] = ck.lot_ids;
  if (ck.train_state) {
    const TrainState& s = *ck.train_state;
    for (const auto& [key, t] : s.best.entries()) w.add("best", key, t.shape(), t.data());
    for (std::size_t i = 0; i < s.adam.m.size(); ++i) w.add("adam.m", std::to_string(i), {s.adam.m[i].size()}, s.adam.m[i]);
    for (std::size_t i = 0; i < s.adam.v.size(); ++i) w.add("adam.v", std::to_string(i), {s.adam.v[i].size()}, s.adam.v[i]);
    json log = json::array();
    for (const auto& e : s.log) log.push_back(json::parse(e.to_json()));
    header["train_state"] = {
        {"epoch", s.epoch},
        {"adam_step", s.adam.step},
        {"best_val", std::isfinite(s.best_val) ? json(s.best_val) : json(nullptr)},
        {"best_epoch", s.best_epoch},
        {"epochs_since_best", s.epochs_since_best},
        {"log", log},
    };
  } else {
    header["train_state"] = nullptr;
  }
  header["tensors"] = w.entries;
  header["payload_doubles"] = w.doubles;
  ck.digest = digest_of(header, w.bytes);
  header["digest"] = ck.digest;

  std::string out(kMagic);
  out += header.dump();
  out.push_back('\n');
  out += w.bytes;
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (!bytes.starts_with(kMagic)) bad("not a checkpoint file (bad magic line)");
  bytes.remove_prefix(kMagic.size());
  const std::size_t newline = bytes.find('\n');
  if (newline == std::string_view::npos) bad("truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(0, newline));
  } catch (const json::parse_error& e) {
    bad(std::string("malformed header: ") + e.what());
  }
  const std::string_view payload = bytes.substr(newline + 1);

  try {
    if (!header.is_object() || !header.contains("format_version") || !header["format_version"].is_number_integer()) {
      bad("header has no integer format_version");
    }
    const int version = header["format_version"].get<int>();
    if (version != kCheckpointFormatVersion) {
      bad("unsupported format_version " + std::to_string(version) + " (this build reads " +
          std::to_string(kCheckpointFormatVersion) + ")");
    }
    const std::size_t doubles = header.at("payload_doubles").get<std::size_t>();
    if (payload.size() != doubles * 8) {
      bad("payload is " + std::to_string(payload.size()) + " bytes, header declares " + std::to_string(doubles * 8) +
          " (truncated or padded file)");
    }
    Checkpoint ck;
    ck.format_version = version;
    ck.digest = header.at("digest").get<std::string>();
    json unsigned_header = header;
    unsigned_header.erase("digest");
    if (digest_of(unsigned_header, payload) != ck.digest) bad("digest mismatch (file is corrupted)");

    ck.config = model_config_from_json(header.at("config").dump());
    ck.lot_ids = header.at("lot_ids").get<std::vector<std::string>>();
    const json& ts = header.at("train_state");
    TrainState state;
    for (const auto& e : header.at("tensors")) {
      const std::string group = e.at("group").get<std::string>();
      const std::string key = e.at("key").get<std::string>();
      const Shape shape = e.at("shape").get<Shape>();
      const std::size_t offset = e.at("offset").get<std::size_t>();
      const std::size_t count = numel(shape);
      if (offset > doubles || count > doubles - offset) bad("tensor " + group + "/" + key + " exceeds the payload");
      std::vector<double> values = read_doubles(payload, offset, count);
      if (group == "params") {
        ck.params.add(key, Tensor::from(shape, std::move(values)));
      } else if (group == "best") {
        state.best.add(key, Tensor::from(shape, std::move(values)));
      } else if (group == "adam.m") {
        state.adam.m.push_back(std::move(values));
      } else if (group == "adam.v") {
        state.adam.v.push_back(std::move(values));
      } else if (group == "stats") {
        (key == "mean" ? ck.stats.mean : ck.stats.std) = std::move(values);
      } else if (group == "weather") {
        if (values.size() != 3) bad("weather statistics must have 3 channels");
        std::copy(values.begin(), values.end(), key == "mean" ? ck.weather.mean : ck.weather.std);
      } else {
        bad("unknown tensor group " + group);
      }
    }
    if (!ts.is_null()) {
      state.epoch = ts.at("epoch").get<std::size_t>();
      state.adam.step = ts.at("adam_step").get<std::size_t>();
      const json& best_val = ts.at("best_val");
      state.best_val = best_val.is_null() ? std::numeric_limits<double>::infinity() : best_val.get<double>();
      state.best_epoch = ts.at("best_epoch").get<std::size_t>();
      state.epochs_since_best = ts.at("epochs_since_best").get<std::size_t>();
      for (const auto& e : ts.at("log")) {
        EpochLog log;
        log.epoch = e.at("epoch").get<std::size_t>();
        log.train_mae = e.at("train_mae").get<double>();
        log.val_mae = e.at("val_mae").get<double>();
        log.lr = e.at("lr").get<double>();
        log.seconds = e.at("seconds").get<double>();
        state.log.push_back(log);
      }
      ck.train_state = std::move(state);
    }
    if (ck.stats.mean.size() != ck.lot_ids.size() || ck.stats.std.size() != ck.lot_ids.size()) {
      bad("normalization statistics do not match the lot list");
    }
    ck.config.validate();
    return ck;
  } catch (const json::exception& e) {
    bad(std::string("inconsistent header: ") + e.what());
  } catch (const DataError& e) {
    bad(std::string("inconsistent header: ") + e.what());
  }
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw std::runtime_error("short write to " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw std::runtime_error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

void save_checkpoint(const std::filesystem::path& path, Checkpoint& checkpoint) {
  write_file_atomic(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str());
}

}  // namespace stpark
