#include "stpark/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "stpark/errors.hpp"

namespace stpark {
namespace {

using nlohmann::json;

template <class T>
struct Field {
  const char* name;
  T ModelConfig::*member;
};

constexpr Field<std::size_t> kModelSizes[] = {
    {"n_lots", &ModelConfig::n_lots},
    {"history", &ModelConfig::history},
    {"horizon", &ModelConfig::horizon},
    {"hidden", &ModelConfig::hidden},
    {"spatial_hidden", &ModelConfig::spatial_hidden},
    {"temporal_features", &ModelConfig::temporal_features},
    {"spatial_numeric", &ModelConfig::spatial_numeric},
    {"planning_vocab", &ModelConfig::planning_vocab},
    {"land_use_vocab", &ModelConfig::land_use_vocab},
    {"category_embedding", &ModelConfig::category_embedding},
    {"n_blocks", &ModelConfig::n_blocks},
    {"n_heads", &ModelConfig::n_heads},
    {"k_modes", &ModelConfig::k_modes},
    {"ffn_multiplier", &ModelConfig::ffn_multiplier},
};

constexpr Field<bool> kModelFlags[] = {
    {"use_slblock", &ModelConfig::use_slblock},
    {"use_spatial_info", &ModelConfig::use_spatial_info},
    {"use_temporal_node", &ModelConfig::use_temporal_node},
    {"use_tlblock", &ModelConfig::use_tlblock},
    {"causal_mask_on", &ModelConfig::causal_mask_on},
    {"use_temporal_pe", &ModelConfig::use_temporal_pe},
    {"residual", &ModelConfig::residual},
    {"paper_literal_scale", &ModelConfig::paper_literal_scale},
    {"predictor_last_step_only", &ModelConfig::predictor_last_step_only},
    {"gco_linear_probe", &ModelConfig::gco_linear_probe},
};

[[noreturn]] void fail(const std::string& where, const std::string& what) {
  throw DataError("config: " + where + ": " + what);
}

std::size_t get_size(const json& v, const std::string& where) {
  if (!v.is_number_unsigned()) fail(where, "expected a non-negative integer");
  return v.get<std::size_t>();
}

double get_double(const json& v, const std::string& where) {
  if (!v.is_number()) fail(where, "expected a number");
  return v.get<double>();
}

bool get_bool(const json& v, const std::string& where) {
  if (!v.is_boolean()) fail(where, "expected true or false");
  return v.get<bool>();
}

std::string get_string(const json& v, const std::string& where) {
  if (!v.is_string()) fail(where, "expected a string");
  return v.get<std::string>();
}

void require_object(const json& v, const std::string& where) {
  if (!v.is_object()) fail(where, "expected an object");
}

ModelConfig parse_model(const json& doc, ModelConfig out) {
  require_object(doc, "model");
  for (const auto& [key, value] : doc.items()) {
    const std::string where = "model." + key;
    bool known = false;
    for (const auto& f : kModelSizes) {
      if (key == f.name) {
        out.*f.member = get_size(value, where);
        known = true;
      }
    }
    for (const auto& f : kModelFlags) {
      if (key == f.name) {
        out.*f.member = get_bool(value, where);
        known = true;
      }
    }
    if (key == "activation") {
      try {
        out.activation = parse_activation(get_string(value, where));
      } catch (const DataError& e) {
        fail(where, e.what());
      }
      known = true;
    }
    if (!known) fail(where, "unknown key");
  }
  return out;
}

json model_json(const ModelConfig& config) {
  json j = json::object();
  for (const auto& f : kModelSizes) j[f.name] = config.*f.member;
  for (const auto& f : kModelFlags) j[f.name] = config.*f.member;
  j["activation"] = std::string(activation_name(config.activation));
  return j;
}

void parse_train(const json& doc, TrainConfig& train, OutputConfig& output) {
  require_object(doc, "train");
  for (const auto& [key, value] : doc.items()) {
    const std::string where = "train." + key;
    if (key == "batch_size") train.batch_size = get_size(value, where);
    else if (key == "lr0") train.lr0 = get_double(value, where);
    else if (key == "lr_halving_period") train.lr_halving_period = get_size(value, where);
    else if (key == "max_epochs") train.max_epochs = get_size(value, where);
    else if (key == "seed") train.seed = get_size(value, where);
    else if (key == "beta1") train.beta1 = get_double(value, where);
    else if (key == "beta2") train.beta2 = get_double(value, where);
    else if (key == "eps") train.eps = get_double(value, where);
    else if (key == "patience") train.patience = get_size(value, where);
    else if (key == "max_batches") train.max_batches = get_size(value, where);
    else if (key == "checkpoint") output.checkpoint = get_string(value, where);
    else if (key == "log") output.log = get_string(value, where);
    else fail(where, "unknown key");
  }
}

void parse_data(const json& doc, DataConfig& data) {
  require_object(doc, "data");
  for (const auto& [key, value] : doc.items()) {
    const std::string where = "data." + key;
    if (key == "dir") {
      data.dir = get_string(value, where);
    } else if (key == "synth") {
      require_object(value, where);
      SynthSpec spec;
      for (const auto& [k, v] : value.items()) {
        const std::string w = where + "." + k;
        if (k == "lots") spec.lots = get_size(v, w);
        else if (k == "days") spec.days = get_size(v, w);
        else if (k == "seed") spec.seed = get_size(v, w);
        else fail(w, "unknown key");
      }
      data.synth = spec;
    } else if (key == "max_missing") {
      data.filter.max_missing = get_double(value, where);
    } else if (key == "kl_threshold") {
      data.filter.kl_threshold = get_double(value, where);
    } else if (key == "bins") {
      data.filter.bins = get_size(value, where);
    } else if (key == "smoothing") {
      data.filter.smoothing = get_double(value, where);
    } else {
      fail(where, "unknown key");
    }
  }
  if (data.dir.empty() == !data.synth.has_value()) fail("data", "set exactly one of dir and synth");
}

json parse_document(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("config: malformed JSON: ") + e.what());
  }
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "gelu") return Activation::Gelu;
  if (name == "relu") return Activation::Relu;
  if (name == "identity") return Activation::Identity;
  throw DataError("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation activation) {
  switch (activation) {
    case Activation::Gelu:
      return "gelu";
    case Activation::Relu:
      return "relu";
    case Activation::Identity:
      return "identity";
  }
  return "gelu";
}

RunConfig parse_run_config(std::string_view json_text) {
  const json doc = parse_document(json_text);
  require_object(doc, "document");
  RunConfig out;
  bool have_data = false;
  for (const auto& [key, value] : doc.items()) {
    if (key == "data") {
      parse_data(value, out.data);
      have_data = true;
    } else if (key == "model") {
      out.model = parse_model(value, out.model);
    } else if (key == "train") {
      parse_train(value, out.train, out.output);
    } else {
      fail(key, "unknown section");
    }
  }
  if (!have_data) fail("data", "section is required");
  out.train.validate();
  return out;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("config: cannot open " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str());
}

void apply_env_overrides(RunConfig& config) {
  const char* seed = std::getenv("STPARK_SEED");
  if (!seed) return;
  char* end = nullptr;
  const unsigned long long value = std::strtoull(seed, &end, 10);
  if (*seed == '\0' || *end != '\0' || *seed == '-') {
    throw DataError("STPARK_SEED must be a non-negative integer, got '" + std::string(seed) + "'");
  }
  config.train.seed = value;
}

std::string model_config_to_json(const ModelConfig& config) { return model_json(config).dump(); }

ModelConfig model_config_from_json(std::string_view json_text) {
  return parse_model(parse_document(json_text), ModelConfig{});
}

}  // namespace stpark
