#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "stpark/ops.hpp"
#include "stpark/tensor.hpp"

namespace stpark {

/// Architecture hyperparameters. Defaults follow the paper-scale setup
/// (C_p = 64, two blocks, twelve-step history and horizon).
struct ModelConfig {
  std::size_t n_lots = 1;             // N
  std::size_t history = 12;           // T
  std::size_t horizon = 12;           // tau
  std::size_t hidden = 64;            // C_p
  std::size_t spatial_hidden = 32;    // C_hs
  std::size_t temporal_features = 8;  // C_t
  std::size_t spatial_numeric = 3;    // lat, lon, road density
  std::size_t planning_vocab = 1;
  std::size_t land_use_vocab = 1;
  std::size_t category_embedding = 8;
  std::size_t n_blocks = 2;  // L
  std::size_t n_heads = 4;   // alpha
  std::size_t k_modes = 0;   // 0 keeps every mode
  std::size_t ffn_multiplier = 4;
  Activation activation = Activation::Gelu;

  // Ablation switches.
  bool use_slblock = true;
  bool use_spatial_info = true;
  bool use_temporal_node = true;
  bool use_tlblock = true;
  bool causal_mask_on = true;
  bool use_temporal_pe = true;

  bool residual = true;
  /// Scale attention scores by 1/sqrt(n_heads) instead of 1/sqrt(head dim).
  bool paper_literal_scale = false;
  bool predictor_last_step_only = false;
  /// Skips layer norm and the channel MLP inside the GCO, leaving the pure
  /// spectral filter idct(spectrum * dct(x)) plus the residual.
  bool gco_linear_probe = false;

  /// C_s: numeric columns plus both categorical embeddings.
  std::size_t spatial_feature_dim() const { return spatial_numeric + 2 * category_embedding; }
  /// Nodes seen by the spatial mixer (N + 1 with the virtual node).
  std::size_t mixer_nodes() const { return n_lots + (use_temporal_node ? 1 : 0); }
  std::size_t retained_modes() const { return k_modes == 0 ? mixer_nodes() : k_modes; }
  std::size_t head_dim() const { return hidden / n_heads; }

  /// Throws DataError on an inconsistent configuration.
  void validate() const;
};

/// Named learnable tensors in creation order. Keys are stable strings such
/// as "blocks.0.gco.spectrum" and are what checkpoints store.
class ModelParams {
 public:
  Tensor& add(std::string key, Tensor value);
  const Tensor& at(const std::string& key) const;
  Tensor& at(const std::string& key);
  bool contains(const std::string& key) const { return index_.count(key) != 0; }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  /// Total number of scalar parameters.
  std::size_t count() const;
  /// Deep copy; the copy shares no storage with this set.
  ModelParams clone() const;
  /// Deep copy that records no autodiff graph; for inference.
  ModelParams frozen() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Static per-lot features. `numeric` is (N, spatial_numeric), already scaled.
struct SpatialInputs {
  Tensor numeric;
  std::vector<std::size_t> planning_ids;
  std::vector<std::size_t> land_use_ids;
};

struct EncodedInputs {
  Tensor pa;        // (B, T, N, C_p)
  Tensor spatial;   // (B, T, N, C_hs)
  Tensor temporal;  // (B, T, 1, C_p)
};

/// Post-block hidden states, recorded when a trace is passed to forward().
struct ForwardTrace {
  std::vector<Tensor> pa;        // (B, T, N, C_p) per block
  std::vector<Tensor> temporal;  // (B, T, 1, C_p) per block
  std::vector<Tensor> attention; // (B', heads, T, T) per block, when TLBlock is on
};

/// Xavier-uniform weights, zero biases, 0.02-scaled normal position
/// encodings, spectra of 1 + 0.02-scaled normal, unit norm gains. Deterministic in `seed`.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

namespace model {

EncodedInputs encode_inputs(const Tensor& x, const Tensor& temporal, const SpatialInputs& spatial,
                            const ModelConfig& config, const ModelParams& params);

/// H = H_pa + concat(H_s, P_s) over channels.
Tensor fuse_spatial(const Tensor& pa, const Tensor& spatial, const Tensor& spatial_position, const ModelConfig& config);

/// (B, T, N, C) + (B, T, 1, C) -> (B*T, N+1, C); virtual node last.
Tensor attach_virtual_node(const Tensor& h, const Tensor& temporal, const ModelConfig& config);
/// Inverse of attach_virtual_node. Without a virtual node the second part
/// is an empty tensor.
std::pair<Tensor, Tensor> detach_virtual_node(const Tensor& mixed, std::size_t batch, const ModelConfig& config);

/// Graph Cosine Operator on (BT, nodes, C): dct over nodes, per-mode
/// spectrum, idct, layer norm, channel MLP, plus the residual.
Tensor gco(const Tensor& h, const ModelConfig& config, const ModelParams& params, const std::string& prefix);

Tensor slblock(const Tensor& h, const ModelConfig& config, const ModelParams& params, const std::string& prefix);

/// Multi-head self attention along axis 1 of (B', L, C). With `causal`, step
/// t attends to steps <= t only.
Tensor multi_head_attention(const Tensor& h, bool causal, const ModelConfig& config, const ModelParams& params,
                            const std::string& prefix, Tensor* weights_out = nullptr);

/// Additive mask: 0 on and below the diagonal, -inf above.
Tensor causal_mask(std::size_t steps);

std::pair<Tensor, Tensor> tlblock(const Tensor& mixed, std::size_t batch, const ModelConfig& config,
                                  const ModelParams& params, const std::string& prefix, Tensor* weights_out = nullptr);

/// (B, T, N, C_p) -> (B, tau, N).
Tensor predict(const Tensor& h, const ModelConfig& config, const ModelParams& params);

Tensor forward(const Tensor& x, const Tensor& temporal, const SpatialInputs& spatial, const ModelConfig& config,
               const ModelParams& params, ForwardTrace* trace = nullptr);

/// Dense self-attention over the node axis with a residual: the quadratic
/// spatial mixer used as the efficiency reference for the GCO.
Tensor dense_msa_mixer(const Tensor& h, const ModelConfig& config, const ModelParams& params,
                       const std::string& prefix);
/// Parameters for dense_msa_mixer under `prefix`.
void add_dense_msa_params(ModelParams& params, const ModelConfig& config, const std::string& prefix,
                          std::uint64_t seed);

}  // namespace model

/// Configuration plus parameters.
class DeepPA {
 public:
  DeepPA(ModelConfig config, std::uint64_t seed);
  DeepPA(ModelConfig config, ModelParams params);

  Tensor forward(const Tensor& x, const Tensor& temporal, const SpatialInputs& spatial,
                 ForwardTrace* trace = nullptr) const {
    return model::forward(x, temporal, spatial, config_, params_, trace);
  }

  const ModelConfig& config() const { return config_; }
  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }

 private:
  ModelConfig config_;
  ModelParams params_;
};

}  // namespace stpark
