// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Joint audio-video denoiser: modality embedders project latents into one
// token sequence, transformer blocks run shared self-attention (with 3D
// rotary on q/k) followed by deterministic per-modality FFN routing, and
// per-modality heads predict velocities back in latent shape.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "core/tensor.hpp"
#include "rope/rope.hpp"

namespace avflow {

enum class FfnVariant { kMsMoe, kSharedFfn };

enum class LoraPlacement { kAttn, kAttnFfn };

struct LoraSpec {
  int64_t rank = 0;  // 0 disables adapters
  double alpha = 1.0;
  LoraPlacement placement = LoraPlacement::kAttn;

  bool enabled() const { return rank > 0; }
};

struct ModelConfig {
  int64_t n_layers = 2;
  int64_t model_dim = 16;
  int64_t n_heads = 2;
  int64_t ffn_dim = 32;
  int64_t n_classes = 9;
  int64_t audio_channels = 2;
  int64_t video_channels = 2;
  int64_t patchify = 1;  // 1 (identity) or 2 (2x2 spatial / time-frequency)
  FfnVariant variant = FfnVariant::kMsMoe;
  LoraSpec lora;
  double rope_base = 10000.0;
  std::optional<std::array<int64_t, 3>> rope_split;

  int64_t head_dim() const { return model_dim / n_heads; }
  RopeConfig rope() const;
  void validate() const;

  // Channel width per token after optional patchify.
  int64_t video_token_channels() const { return video_channels * patchify * patchify; }
  int64_t audio_token_channels() const { return audio_channels * patchify * patchify; }
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct ConditionInput {
  int64_t class_id = 0;
  double t = 0.0;
};

enum class Modality : uint8_t { kVideo = 0, kAudio = 1 };

struct TokenBatch {
  Tensor tokens;  // [n x model_dim]
  std::vector<Modality> mask;
  std::vector<PositionTriple> ids;
  GridSpec grid;  // token grid (post-patchify extents)
};

struct ParamCount {
  int64_t total = 0;
  int64_t activated_per_token = 0;
};

struct Parameter {
  std::string name;
  Tensor tensor;
};

class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // Token grid seen by position IDs (latent grid divided by patchify).
  GridSpec token_grid(const GridSpec& latent_grid) const;

  TokenBatch embed(const Tensor& audio_latent, const Tensor& video_latent,
                   AudioIdStrategy strategy, const GridSpec& latent_grid) const;
  TokenBatch embed_audio_only(const Tensor& audio_latent, AudioIdStrategy strategy,
                              const GridSpec& latent_grid) const;

  // One transformer block on an already-embedded batch.
  TokenBatch block_forward(int64_t layer, const TokenBatch& batch,
                           const ConditionInput& cond) const;

  // All blocks plus final norm; returns [n x model_dim].
  Tensor forward_tokens(const TokenBatch& batch, const ConditionInput& cond) const;

  // Full joint pass: (vhat_audio, vhat_video) in latent shapes.
  std::pair<Tensor, Tensor> forward(const Tensor& audio_xt, const Tensor& video_xt,
                                    const ConditionInput& cond, AudioIdStrategy strategy,
                                    const GridSpec& latent_grid) const;

  // Audio-only pass (no video tokens in the sequence).
  Tensor forward_audio(const Tensor& audio_xt, const ConditionInput& cond,
                       AudioIdStrategy strategy, const GridSpec& latent_grid) const;

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  Tensor param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  void zero_grads();

  static ParamCount count_params(const ModelConfig& cfg);

  // Attaches zero-initialized low-rank adapters to the spec'd linear layers.
  void apply_lora(const LoraSpec& spec, uint64_t seed);
  // Folds adapter deltas into the base weights and removes the adapters.
  void merge_lora();
  bool lora_active() const { return !adapters_.empty(); }
  std::vector<std::string> lora_param_names() const;

  void save_checkpoint(const std::string& path) const;
  static Model load_checkpoint(const std::string& path);

  Model clone() const;
  uint64_t param_hash() const;
  uint64_t param_hash(const std::string& name_prefix_filter) const;

 private:
  struct Adapter {
    int64_t a_index;  // index into params_: [d_out x r]
    int64_t b_index;  // [r x d_in]
    double alpha;
    int64_t rank;
  };

  Tensor linear(const Tensor& x, const std::string& prefix) const;
  Tensor matmul_with_lora(const Tensor& x, const std::string& weight_name) const;
  Tensor ffn(const Tensor& x, const std::string& prefix) const;
  struct CondContext {
    std::vector<Tensor> scale;  // per block, [model_dim]
    std::vector<Tensor> shift;
  };
  CondContext condition(const ConditionInput& cond) const;
  Tensor block_impl(int64_t layer, const Tensor& x, const std::vector<Modality>& mask,
                    const std::vector<PositionTriple>& ids, const CondContext& cc) const;
  Tensor add_param(const std::string& name, Shape shape, std::vector<double> values);

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::map<std::string, int64_t> index_;
  std::map<std::string, Adapter> adapters_;  // keyed by adapted weight name
};

// Element permutation with gradient support: out[i] = x[index_map[i]].
Tensor permute_elements(const Tensor& x, std::vector<int64_t> index_map, Shape out_shape);

}  // namespace avflow
