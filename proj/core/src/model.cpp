#include "stpark/model.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "stpark/errors.hpp"
#include "stpark/spectral.hpp"

namespace stpark {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw DataError("invalid model config: " + what); };
  if (n_lots < 1) fail("n_lots must be >= 1");
  if (history < 1) fail("history must be >= 1");
  if (horizon < 1) fail("horizon must be >= 1");
  if (n_blocks < 1) fail("n_blocks must be >= 1");
  if (n_heads < 1 || hidden % n_heads != 0) fail("hidden must be divisible by n_heads");
  if (spatial_hidden < 1 || spatial_hidden >= hidden) fail("spatial_hidden must be in [1, hidden)");
  if (temporal_features < 1) fail("temporal_features must be >= 1");
  if (planning_vocab < 1 || land_use_vocab < 1) fail("categorical vocabularies must be non-empty");
  if (ffn_multiplier < 1) fail("ffn_multiplier must be >= 1");
  if (k_modes > mixer_nodes()) fail("k_modes exceeds the number of mixer nodes");
}

Tensor& ModelParams::add(std::string key, Tensor value) {
  if (contains(key)) throw std::logic_error("duplicate parameter key " + key);
  value.set_requires_grad(true);
  index_.emplace(key, entries_.size());
  entries_.emplace_back(std::move(key), std::move(value));
  return entries_.back().second;
}

const Tensor& ModelParams::at(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + key);
  return entries_[it->second].second;
}

Tensor& ModelParams::at(const std::string& key) {
  auto it = index_.find(key);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + key);
  return entries_[it->second].second;
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& [key, t] : entries_) out.push_back(t);
  return out;
}

std::size_t ModelParams::count() const {
  std::size_t total = 0;
  for (const auto& [key, t] : entries_) total += t.numel();
  return total;
}

ModelParams ModelParams::clone() const {
  ModelParams copy;
  for (const auto& [key, t] : entries_) copy.add(key, t.clone(true));
  return copy;
}

ModelParams ModelParams::frozen() const {
  ModelParams copy;
  for (const auto& [key, t] : entries_) copy.add(key, t.clone(false)).set_requires_grad(false);
  return copy;
}

void ModelParams::zero_grad() {
  for (auto& [key, t] : entries_) t.zero_grad();
}

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor xavier(std::size_t fan_in, std::size_t fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(fan_in * fan_out);
    for (double& x : v) x = dist(rng_);
    return Tensor::from({fan_in, fan_out}, std::move(v));
  }

  Tensor position(Shape shape) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = 0.02 * dist(rng_);
    return Tensor::from(std::move(shape), std::move(v));
  }

  // A flat spectrum would make the operator an exact identity over nodes.
  Tensor spectrum(std::size_t modes) {
    Tensor t = position({modes});
    for (double& x : t.mutable_data()) x += 1.0;
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

void add_linear(ModelParams& p, Initializer& init, const std::string& key, std::size_t in, std::size_t out) {
  p.add(key + ".weight", init.xavier(in, out));
  p.add(key + ".bias", Tensor::zeros({out}));
}

void add_norm(ModelParams& p, const std::string& key, std::size_t width) {
  p.add(key + ".gain", Tensor::full({width}, 1.0));
  p.add(key + ".bias", Tensor::zeros({width}));
}

void add_attention(ModelParams& p, Initializer& init, const std::string& key, std::size_t c) {
  add_linear(p, init, key + ".query", c, c);
  // Softmax is invariant to a key bias, so the key projection has none.
  p.add(key + ".key.weight", init.xavier(c, c));
  add_linear(p, init, key + ".value", c, c);
  add_linear(p, init, key + ".out", c, c);
}

Tensor dense(const Tensor& x, const ModelParams& p, const std::string& key) {
  return linear(x, p.at(key + ".weight"), p.at(key + ".bias"));
}

Tensor norm(const Tensor& x, const ModelParams& p, const std::string& key) {
  return layer_norm(x, p.at(key + ".gain"), p.at(key + ".bias"));
}

Tensor two_layer(const Tensor& x, const ModelConfig& c, const ModelParams& p, const std::string& key) {
  return dense(activate(dense(x, p, key + ".fc1"), c.activation), p, key + ".fc2");
}

Tensor residual(const Tensor& x, const Tensor& update, const ModelConfig& c) { return c.residual ? add(x, update) : update; }

void ensure_finite(const Tensor& t, const std::string& where) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(where + ": non-finite value");
  }
}

std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i) + "."; }

// Materializes `t` broadcast to `shape`.
Tensor broadcast_to(const Tensor& t, Shape shape) { return add(t, Tensor::zeros(std::move(shape))); }

}  // namespace

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Initializer init(seed);
  ModelParams p;
  const std::size_t c = config.hidden;
  add_linear(p, init, "pa_encoder", 1, c);
  p.add("spatial.planning_embedding", init.xavier(config.planning_vocab, config.category_embedding));
  p.add("spatial.land_use_embedding", init.xavier(config.land_use_vocab, config.category_embedding));
  add_linear(p, init, "spatial_encoder", config.spatial_feature_dim(), config.spatial_hidden);
  p.add("spatial_position", init.position({config.n_lots, c - config.spatial_hidden}));
  add_linear(p, init, "temporal_encoder", config.temporal_features, c);

  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    const std::string pre = block_prefix(b);
    if (config.use_slblock) {
      p.add(pre + "gco.spectrum", init.spectrum(config.mixer_nodes()));
      add_norm(p, pre + "gco.norm", c);
      add_linear(p, init, pre + "gco.mlp.fc1", c, c);
      add_linear(p, init, pre + "gco.mlp.fc2", c, c);
    } else {
      add_linear(p, init, pre + "sl_pointwise.fc1", c, c);
      add_linear(p, init, pre + "sl_pointwise.fc2", c, c);
    }
    if (config.use_tlblock) {
      if (config.use_temporal_pe) p.add(pre + "temporal_position", init.position({config.history, c}));
      add_norm(p, pre + "attn.norm", c);
      add_attention(p, init, pre + "attn", c);
      add_norm(p, pre + "ffn.norm", c);
      add_linear(p, init, pre + "ffn.fc1", c, c * config.ffn_multiplier);
      add_linear(p, init, pre + "ffn.fc2", c * config.ffn_multiplier, c);
    } else {
      add_linear(p, init, pre + "tl_pointwise.fc1", c, c);
      add_linear(p, init, pre + "tl_pointwise.fc2", c, c);
    }
  }
  const std::size_t steps = config.predictor_last_step_only ? 1 : config.history;
  add_linear(p, init, "predictor", steps * c, config.horizon);
  return p;
}

namespace model {

EncodedInputs encode_inputs(const Tensor& x, const Tensor& temporal, const SpatialInputs& spatial,
                            const ModelConfig& config, const ModelParams& params) {
  const std::size_t n = config.n_lots;
  const std::size_t t = config.history;
  if (x.dim() != 3 || x.shape()[1] != t || x.shape()[2] != n) {
    throw DimensionError("encode_inputs: X has shape " + to_string(x.shape()) + ", expected (B," + std::to_string(t) +
                         "," + std::to_string(n) + ")");
  }
  const std::size_t b = x.shape()[0];
  if (temporal.shape() != Shape{b, t, config.temporal_features}) {
    throw DimensionError("encode_inputs: F_t has shape " + to_string(temporal.shape()) + ", expected " +
                         to_string({b, t, config.temporal_features}));
  }
  if (spatial.numeric.shape() != Shape{n, config.spatial_numeric} || spatial.planning_ids.size() != n ||
      spatial.land_use_ids.size() != n) {
    throw DimensionError("encode_inputs: spatial features do not cover " + std::to_string(n) + " lots");
  }
  EncodedInputs out;
  out.pa = dense(reshape(x, {b, t, n, 1}), params, "pa_encoder");
  const Tensor fs = concat({spatial.numeric, embedding(params.at("spatial.planning_embedding"), spatial.planning_ids),
                            embedding(params.at("spatial.land_use_embedding"), spatial.land_use_ids)},
                           1);
  out.spatial = broadcast_to(dense(fs, params, "spatial_encoder"), {b, t, n, config.spatial_hidden});
  out.temporal = reshape(dense(temporal, params, "temporal_encoder"), {b, t, 1, config.hidden});
  return out;
}

Tensor fuse_spatial(const Tensor& pa, const Tensor& spatial, const Tensor& spatial_position, const ModelConfig& config) {
  if (!config.use_spatial_info) return pa;
  if (pa.dim() != 4 || spatial.dim() != 4 || spatial.shape()[3] + spatial_position.shape().back() != pa.shape()[3]) {
    throw DimensionError("fuse_spatial: channels " + to_string(spatial.shape()) + " + " +
                         to_string(spatial_position.shape()) + " do not add up to " + to_string(pa.shape()));
  }
  Shape ps = pa.shape();
  ps[3] = spatial_position.shape().back();
  return add(pa, concat({spatial, broadcast_to(spatial_position, ps)}, 3));
}

Tensor attach_virtual_node(const Tensor& h, const Tensor& temporal, const ModelConfig& config) {
  const Shape& s = h.shape();
  if (s.size() != 4) throw DimensionError("attach_virtual_node: expected (B,T,N,C), got " + to_string(s));
  if (!config.use_temporal_node) return reshape(h, {s[0] * s[1], s[2], s[3]});
  if (temporal.shape() != Shape{s[0], s[1], 1, s[3]}) {
    throw DimensionError("attach_virtual_node: temporal node " + to_string(temporal.shape()) + " does not match " +
                         to_string(s));
  }
  return reshape(concat({h, temporal}, 2), {s[0] * s[1], s[2] + 1, s[3]});
}

std::pair<Tensor, Tensor> detach_virtual_node(const Tensor& mixed, std::size_t batch, const ModelConfig& config) {
  const Shape& s = mixed.shape();
  if (s.size() != 3 || batch == 0 || s[0] % batch != 0) {
    throw DimensionError("detach_virtual_node: cannot split " + to_string(s) + " into batch " + std::to_string(batch));
  }
  const std::size_t t = s[0] / batch;
  const std::size_t c = s[2];
  const Tensor h4 = reshape(mixed, {batch, t, s[1], c});
  if (!config.use_temporal_node) return {h4, Tensor::zeros({0})};
  auto parts = split(h4, {s[1] - 1, 1}, 2);
  return {parts[0], parts[1]};
}

Tensor gco(const Tensor& h, const ModelConfig& config, const ModelParams& params, const std::string& prefix) {
  if (h.dim() != 3) throw DimensionError("gco: expected (BT, nodes, C), got " + to_string(h.shape()));
  const std::size_t nodes = h.shape()[1];
  const std::string key = prefix + "gco";
  const Tensor& spectrum = params.at(key + ".spectrum");
  if (spectrum.numel() != nodes) {
    throw DimensionError("gco: spectrum has " + std::to_string(spectrum.numel()) + " modes for " +
                         std::to_string(nodes) + " nodes");
  }
  // Step 1: frequency domain over the node axis.
  Tensor z = spectral::dct2(h, 1);
  const std::size_t kept = config.k_modes == 0 ? nodes : config.k_modes;
  if (kept < nodes) z = spectral::truncate_modes(z, kept, 1);
  ensure_finite(z, key + " step 1");
  // Step 2: learned per-mode response.
  z = mul(z, reshape(spectrum, {nodes, 1}));
  ensure_finite(z, key + " step 2");
  // Step 3: back to the node domain.
  z = spectral::idct2(z, 1);
  ensure_finite(z, key + " step 3");
  if (!config.gco_linear_probe) {
    // Step 4.
    z = norm(z, params, key + ".norm");
    ensure_finite(z, key + " step 4");
    // Step 5: channel MLP.
    z = two_layer(z, config, params, key + ".mlp");
    ensure_finite(z, key + " step 5");
  }
  return residual(h, z, config);
}

Tensor slblock(const Tensor& h, const ModelConfig& config, const ModelParams& params, const std::string& prefix) {
  if (config.use_slblock) return gco(h, config, params, prefix);
  return residual(h, two_layer(h, config, params, prefix + "sl_pointwise"), config);
}

Tensor causal_mask(std::size_t steps) {
  std::vector<double> m(steps * steps, 0.0);
  for (std::size_t i = 0; i < steps; ++i) {
    for (std::size_t j = i + 1; j < steps; ++j) m[i * steps + j] = -std::numeric_limits<double>::infinity();
  }
  return Tensor::from({steps, steps}, std::move(m));
}

Tensor multi_head_attention(const Tensor& h, bool causal, const ModelConfig& config, const ModelParams& params,
                            const std::string& prefix, Tensor* weights_out) {
  if (h.dim() != 3 || h.shape()[2] != config.hidden) {
    throw DimensionError("attention: expected (B', L, " + std::to_string(config.hidden) + "), got " +
                         to_string(h.shape()));
  }
  const std::size_t rows = h.shape()[0];
  const std::size_t len = h.shape()[1];
  if (len == 0) throw DimensionError("attention: sequence length is 0");
  const std::size_t heads = config.n_heads;
  const std::size_t d = config.head_dim();
  auto split_heads = [&](const Tensor& t) { return permute(reshape(t, {rows, len, heads, d}), {0, 2, 1, 3}); };
  const Tensor q = split_heads(dense(h, params, prefix + ".query"));
  const Tensor k = split_heads(matmul(h, params.at(prefix + ".key.weight")));
  const Tensor v = split_heads(dense(h, params, prefix + ".value"));
  const double factor =
      1.0 / std::sqrt(static_cast<double>(config.paper_literal_scale ? heads : d));
  Tensor scores = scale(matmul(q, transpose(k)), factor);
  if (causal) scores = add(scores, causal_mask(len));
  const Tensor weights = softmax(scores, 3);
  if (weights_out) *weights_out = weights;
  const Tensor mixed = reshape(permute(matmul(weights, v), {0, 2, 1, 3}), {rows, len, config.hidden});
  return dense(mixed, params, prefix + ".out");
}

std::pair<Tensor, Tensor> tlblock(const Tensor& mixed, std::size_t batch, const ModelConfig& config,
                                  const ModelParams& params, const std::string& prefix, Tensor* weights_out) {
  auto [pa, temporal] = detach_virtual_node(mixed, batch, config);
  const std::size_t t = pa.shape()[1];
  const std::size_t n = pa.shape()[2];
  const std::size_t c = pa.shape()[3];
  // Lots and the temporal node become independent sequences over time.
  Tensor seq = reshape(permute(pa, {0, 2, 1, 3}), {batch * n, t, c});
  if (config.use_temporal_node) seq = concat({seq, reshape(temporal, {batch, t, c})}, 0);

  if (config.use_tlblock) {
    if (config.use_temporal_pe) seq = add(seq, params.at(prefix + "temporal_position"));
    seq = residual(seq,
                   multi_head_attention(norm(seq, params, prefix + "attn.norm"), config.causal_mask_on, config,
                                        params, prefix + "attn", weights_out),
                   config);
    seq = residual(seq, two_layer(norm(seq, params, prefix + "ffn.norm"), config, params, prefix + "ffn"), config);
  } else {
    seq = residual(seq, two_layer(seq, config, params, prefix + "tl_pointwise"), config);
  }

  Tensor pa_out = permute(reshape(slice(seq, 0, 0, batch * n), {batch, n, t, c}), {0, 2, 1, 3});
  Tensor temporal_out = config.use_temporal_node
                            ? reshape(slice(seq, 0, batch * n, batch * n + batch), {batch, t, 1, c})
                            : temporal;
  return {pa_out, temporal_out};
}

Tensor predict(const Tensor& h, const ModelConfig& config, const ModelParams& params) {
  if (h.dim() != 4 || h.shape()[3] != config.hidden) {
    throw DimensionError("predict: expected (B,T,N," + std::to_string(config.hidden) + "), got " +
                         to_string(h.shape()));
  }
  const std::size_t b = h.shape()[0];
  const std::size_t t = h.shape()[1];
  const std::size_t n = h.shape()[2];
  const std::size_t c = h.shape()[3];
  Tensor per_node = permute(h, {0, 2, 1, 3});
  std::size_t steps = t;
  if (config.predictor_last_step_only) {
    per_node = slice(per_node, 2, t - 1, t);
    steps = 1;
  }
  const Tensor flat = reshape(per_node, {b, n, steps * c});
  return permute(dense(flat, params, "predictor"), {0, 2, 1});
}

Tensor forward(const Tensor& x, const Tensor& temporal, const SpatialInputs& spatial, const ModelConfig& config,
               const ModelParams& params, ForwardTrace* trace) {
  const EncodedInputs enc = encode_inputs(x, temporal, spatial, config, params);
  const std::size_t batch = x.shape()[0];
  Tensor h = fuse_spatial(enc.pa, enc.spatial, params.at("spatial_position"), config);
  Tensor ht = enc.temporal;
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    const std::string pre = block_prefix(b);
    try {
      Tensor weights;
      const Tensor mixed = slblock(attach_virtual_node(h, ht, config), config, params, pre);
      std::tie(h, ht) = tlblock(mixed, batch, config, params, pre, trace ? &weights : nullptr);
      if (trace) {
        trace->pa.push_back(h);
        trace->temporal.push_back(ht);
        if (config.use_tlblock) trace->attention.push_back(weights);
      }
    } catch (const NumericError& e) {
      throw NumericError("block " + std::to_string(b) + ": " + e.what());
    } catch (const DimensionError& e) {
      throw DimensionError("block " + std::to_string(b) + ": " + e.what());
    }
  }
  return predict(h, config, params);
}

void add_dense_msa_params(ModelParams& params, const ModelConfig& config, const std::string& prefix,
                          std::uint64_t seed) {
  Initializer init(seed);
  add_norm(params, prefix + "msa.norm", config.hidden);
  add_attention(params, init, prefix + "msa", config.hidden);
}

Tensor dense_msa_mixer(const Tensor& h, const ModelConfig& config, const ModelParams& params,
                       const std::string& prefix) {
  const Tensor update =
      multi_head_attention(norm(h, params, prefix + "msa.norm"), false, config, params, prefix + "msa");
  return residual(h, update, config);
}

}  // namespace model

DeepPA::DeepPA(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), params_(init_params(config_, seed)) {}

DeepPA::DeepPA(ModelConfig config, ModelParams params) : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
}

}  // namespace stpark
