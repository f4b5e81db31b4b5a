// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "model/model.hpp"

#include <algorithm>
#include <cmath>

#include "core/container.hpp"
#include "core/rng.hpp"

namespace avflow {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInitStd = 0.02;
constexpr double kTimeScale = 1000.0;  // sinusoidal embedding frequency span

enum class Init { kNormal, kZero, kOne };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

std::vector<std::string> ffn_prefixes(const ModelConfig& cfg, int64_t layer) {
  const std::string pf = "block" + std::to_string(layer) + ".";
  if (cfg.variant == FfnVariant::kMsMoe) return {pf + "audio_ffn", pf + "video_ffn"};
  return {pf + "ffn"};
}

std::vector<ParamSpec> enumerate_base_params(const ModelConfig& cfg) {
  const int64_t d = cfg.model_dim;
  const int64_t f = cfg.ffn_dim;
  std::vector<ParamSpec> out;
  out.push_back({"video_embed.w", {cfg.video_token_channels(), d}, Init::kNormal});
  out.push_back({"video_embed.b", {d}, Init::kZero});
  out.push_back({"audio_embed.w", {cfg.audio_token_channels(), d}, Init::kNormal});
  out.push_back({"audio_embed.b", {d}, Init::kZero});
  out.push_back({"class_embed.w", {cfg.n_classes, d}, Init::kNormal});
  out.push_back({"cond.w1", {d, d}, Init::kNormal});
  out.push_back({"cond.b1", {d}, Init::kZero});
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    const std::string pf = "block" + std::to_string(i) + ".";
    out.push_back({pf + "mod.w", {d, 2 * d}, Init::kZero});
    out.push_back({pf + "mod.b", {2 * d}, Init::kZero});
    out.push_back({pf + "norm1.g", {d}, Init::kOne});
    out.push_back({pf + "norm1.b", {d}, Init::kZero});
    for (const char* nm : {"wq", "wk", "wv", "wo"})
      out.push_back({pf + "attn." + std::string(nm), {d, d}, Init::kNormal});
    for (const char* nm : {"bq", "bk", "bv", "bo"})
      out.push_back({pf + "attn." + std::string(nm), {d}, Init::kZero});
    out.push_back({pf + "norm2.g", {d}, Init::kOne});
    out.push_back({pf + "norm2.b", {d}, Init::kZero});
    for (const auto& ffn : ffn_prefixes(cfg, i)) {
      out.push_back({ffn + ".w1", {d, f}, Init::kNormal});
      out.push_back({ffn + ".b1", {f}, Init::kZero});
      out.push_back({ffn + ".w2", {f, d}, Init::kNormal});
      out.push_back({ffn + ".b2", {d}, Init::kZero});
    }
  }
  out.push_back({"final_norm.g", {d}, Init::kOne});
  out.push_back({"final_norm.b", {d}, Init::kZero});
  // Prediction heads start at zero so the initial velocity estimate is zero.
  out.push_back({"audio_head.w", {d, cfg.audio_token_channels()}, Init::kZero});
  out.push_back({"audio_head.b", {cfg.audio_token_channels()}, Init::kZero});
  out.push_back({"video_head.w", {d, cfg.video_token_channels()}, Init::kZero});
  out.push_back({"video_head.b", {cfg.video_token_channels()}, Init::kZero});
  return out;
}

std::vector<std::string> lora_target_weights(const ModelConfig& cfg, LoraPlacement placement) {
  std::vector<std::string> out;
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    const std::string pf = "block" + std::to_string(i) + ".attn.";
    for (const char* nm : {"wq", "wk", "wv", "wo"}) out.push_back(pf + nm);
    if (placement == LoraPlacement::kAttnFfn) {
      for (const auto& ffn : ffn_prefixes(cfg, i)) {
        out.push_back(ffn + ".w1");
        out.push_back(ffn + ".w2");
      }
    }
  }
  return out;
}

int64_t ffn_param_count(const ModelConfig& cfg) {
  const int64_t d = cfg.model_dim;
  const int64_t f = cfg.ffn_dim;
  return (d * f + f) + (f * d + d);
}

}  // namespace

RopeConfig ModelConfig::rope() const {
  if (rope_split) {
    RopeConfig rc;
    rc.head_dim = head_dim();
    rc.d_t = (*rope_split)[0];
    rc.d_h = (*rope_split)[1];
    rc.d_w = (*rope_split)[2];
    rc.base = rope_base;
    rc.validate();
    return rc;
  }
  return RopeConfig::auto_split(head_dim(), rope_base);
}

void ModelConfig::validate() const {
  if (n_layers < 1) throw ContractError("n_layers must be >= 1");
  if (model_dim < 1 || n_heads < 1 || model_dim % n_heads != 0)
    throw ContractError("model_dim must be a positive multiple of n_heads");
  if (ffn_dim < 1) throw ContractError("ffn_dim must be >= 1");
  if (n_classes < 1) throw ContractError("n_classes must be >= 1");
  if (audio_channels < 1 || video_channels < 1)
    throw ContractError("channel counts must be >= 1");
  if (patchify != 1 && patchify != 2) throw ContractError("patchify must be 1 or 2");
  rope();  // validates the split
  if (lora.enabled() && lora.rank < 1) throw ContractError("lora rank must be positive");
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["n_layers"] = cfg.n_layers;
  j["model_dim"] = cfg.model_dim;
  j["n_heads"] = cfg.n_heads;
  j["ffn_dim"] = cfg.ffn_dim;
  j["n_classes"] = cfg.n_classes;
  j["audio_channels"] = cfg.audio_channels;
  j["video_channels"] = cfg.video_channels;
  j["patchify"] = cfg.patchify;
  j["variant"] = cfg.variant == FfnVariant::kMsMoe ? "msmoe" : "shared-ffn";
  j["rope_base"] = cfg.rope_base;
  if (cfg.rope_split)
    j["rope_split"] = std::vector<int64_t>{(*cfg.rope_split)[0], (*cfg.rope_split)[1],
                                           (*cfg.rope_split)[2]};
  else
    j["rope_split"] = nullptr;
  j["lora"] = {{"rank", cfg.lora.rank},
               {"alpha", cfg.lora.alpha},
               {"placement", cfg.lora.placement == LoraPlacement::kAttn ? "attn" : "attn-ffn"}};
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int64_t>();
  cfg.model_dim = j.at("model_dim").get<int64_t>();
  cfg.n_heads = j.at("n_heads").get<int64_t>();
  cfg.ffn_dim = j.at("ffn_dim").get<int64_t>();
  cfg.n_classes = j.at("n_classes").get<int64_t>();
  cfg.audio_channels = j.at("audio_channels").get<int64_t>();
  cfg.video_channels = j.at("video_channels").get<int64_t>();
  cfg.patchify = j.at("patchify").get<int64_t>();
  const std::string variant = j.at("variant").get<std::string>();
  if (variant == "msmoe")
    cfg.variant = FfnVariant::kMsMoe;
  else if (variant == "shared-ffn")
    cfg.variant = FfnVariant::kSharedFfn;
  else
    throw ContractError("unknown model variant '" + variant + "'");
  cfg.rope_base = j.at("rope_base").get<double>();
  if (j.contains("rope_split") && !j.at("rope_split").is_null()) {
    const auto split = j.at("rope_split").get<std::vector<int64_t>>();
    if (split.size() != 3) throw ContractError("rope_split must have three entries");
    cfg.rope_split = std::array<int64_t, 3>{split[0], split[1], split[2]};
  }
  const auto& lj = j.at("lora");
  cfg.lora.rank = lj.at("rank").get<int64_t>();
  cfg.lora.alpha = lj.at("alpha").get<double>();
  const std::string placement = lj.at("placement").get<std::string>();
  if (placement == "attn")
    cfg.lora.placement = LoraPlacement::kAttn;
  else if (placement == "attn-ffn")
    cfg.lora.placement = LoraPlacement::kAttnFfn;
  else
    throw ContractError("unknown lora placement '" + placement + "'");
  cfg.validate();
  return cfg;
}

Tensor permute_elements(const Tensor& x, std::vector<int64_t> index_map, Shape out_shape) {
  if (shape_numel(out_shape) != static_cast<int64_t>(index_map.size()))
    throw ContractError("permute_elements: map length does not match output shape");
  const auto xv = x.values();
  std::vector<double> out(index_map.size());
  for (size_t i = 0; i < index_map.size(); ++i) {
    const int64_t src = index_map[i];
    if (src < 0 || src >= x.numel()) throw ContractError("permute_elements: index out of range");
    out[i] = xv[static_cast<size_t>(src)];
  }
  return make_op(std::move(out_shape), std::move(out), {x},
                 [index_map = std::move(index_map)](TensorNode& node) {
                   auto& xn = *node.inputs[0];
                   if (!xn.requires_grad) return;
                   xn.ensure_grad();
                   for (size_t i = 0; i < index_map.size(); ++i)
                     xn.grad[static_cast<size_t>(index_map[i])] += node.grad[i];
                 });
}

namespace {

// [T x H x W x C] -> [T*(H/p)*(W/p) x C*p*p], patch-major channel layout.
Tensor patchify_video(const Tensor& latent, const GridSpec& grid, int64_t p, int64_t channels) {
  const int64_t t_v = grid.t_v, h = grid.h, w = grid.w, c = channels;
  if (latent.shape() != Shape{t_v, h, w, c})
    throw ContractError("video latent shape mismatch: got " + shape_str(latent.shape()));
  if (p == 1) return reshape(latent, {t_v * h * w, c});
  if (h % p != 0 || w % p != 0)
    throw ContractError("patchify requires even spatial extents");
  std::vector<int64_t> map;
  map.reserve(static_cast<size_t>(latent.numel()));
  for (int64_t t = 0; t < t_v; ++t)
    for (int64_t hp = 0; hp < h / p; ++hp)
      for (int64_t wp = 0; wp < w / p; ++wp)
        for (int64_t dh = 0; dh < p; ++dh)
          for (int64_t dw = 0; dw < p; ++dw)
            for (int64_t ch = 0; ch < c; ++ch)
              map.push_back((((t * h + hp * p + dh) * w) + wp * p + dw) * c + ch);
  return permute_elements(latent, std::move(map), {t_v * (h / p) * (w / p), c * p * p});
}

Tensor unpatchify_video(const Tensor& tokens, const GridSpec& grid, int64_t p, int64_t channels) {
  const int64_t t_v = grid.t_v, h = grid.h, w = grid.w, c = channels;
  if (p == 1) return reshape(tokens, {t_v, h, w, c});
  std::vector<int64_t> map;
  map.reserve(static_cast<size_t>(tokens.numel()));
  const int64_t row_w = c * p * p;
  for (int64_t t = 0; t < t_v; ++t)
    for (int64_t hh = 0; hh < h; ++hh)
      for (int64_t ww = 0; ww < w; ++ww)
        for (int64_t ch = 0; ch < c; ++ch) {
          const int64_t hp = hh / p, dh = hh % p, wp = ww / p, dw = ww % p;
          const int64_t row = (t * (h / p) + hp) * (w / p) + wp;
          map.push_back(row * row_w + (dh * p + dw) * c + ch);
        }
  return permute_elements(tokens, std::move(map), {t_v, h, w, c});
}

// [T_a x M x C] -> [(T_a/p)*(M/p) x C*p*p]
Tensor patchify_audio(const Tensor& latent, const GridSpec& grid, int64_t p, int64_t channels) {
  const int64_t t_a = grid.t_a, m = grid.m, c = channels;
  if (latent.shape() != Shape{t_a, m, c})
    throw ContractError("audio latent shape mismatch: got " + shape_str(latent.shape()));
  if (p == 1) return reshape(latent, {t_a * m, c});
  if (t_a % p != 0 || m % p != 0)
    throw ContractError("patchify requires even audio extents");
  std::vector<int64_t> map;
  map.reserve(static_cast<size_t>(latent.numel()));
  for (int64_t tp = 0; tp < t_a / p; ++tp)
    for (int64_t mp = 0; mp < m / p; ++mp)
      for (int64_t dt = 0; dt < p; ++dt)
        for (int64_t dm = 0; dm < p; ++dm)
          for (int64_t ch = 0; ch < c; ++ch)
            map.push_back(((tp * p + dt) * m + mp * p + dm) * c + ch);
  return permute_elements(latent, std::move(map), {(t_a / p) * (m / p), c * p * p});
}

Tensor unpatchify_audio(const Tensor& tokens, const GridSpec& grid, int64_t p, int64_t channels) {
  const int64_t t_a = grid.t_a, m = grid.m, c = channels;
  if (p == 1) return reshape(tokens, {t_a, m, c});
  std::vector<int64_t> map;
  map.reserve(static_cast<size_t>(tokens.numel()));
  const int64_t row_w = c * p * p;
  for (int64_t tt = 0; tt < t_a; ++tt)
    for (int64_t mm = 0; mm < m; ++mm)
      for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t tp = tt / p, dt = tt % p, mp = mm / p, dm = mm % p;
        const int64_t row = tp * (m / p) + mp;
        map.push_back(row * row_w + (dt * p + dm) * c + ch);
      }
  return permute_elements(tokens, std::move(map), {t_a, m, c});
}

}  // namespace

Model::Model(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0x6d6f64656cULL));
  for (const auto& spec : enumerate_base_params(cfg_)) {
    const auto n = static_cast<size_t>(shape_numel(spec.shape));
    std::vector<double> values;
    switch (spec.init) {
      case Init::kNormal: values = rng.normal_vec(n, kInitStd); break;
      case Init::kZero: values.assign(n, 0.0); break;
      case Init::kOne: values.assign(n, 1.0); break;
    }
    add_param(spec.name, spec.shape, std::move(values));
  }
  if (cfg_.lora.enabled()) {
    const LoraSpec spec = cfg_.lora;
    cfg_.lora.rank = 0;  // apply_lora re-installs it
    apply_lora(spec, seed);
  }
}

Tensor Model::add_param(const std::string& name, Shape shape, std::vector<double> values) {
  if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
  Tensor t = Tensor::from_values(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  index_[name] = static_cast<int64_t>(params_.size());
  params_.push_back({name, t});
  return t;
}

Tensor Model::param(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
  return params_[static_cast<size_t>(it->second)].tensor;
}

bool Model::has_param(const std::string& name) const { return index_.count(name) > 0; }

void Model::zero_grads() {
  for (auto& p : params_) p.tensor.zero_grad();
}

GridSpec Model::token_grid(const GridSpec& latent_grid) const {
  latent_grid.validate();
  if (cfg_.patchify == 1) return latent_grid;
  const int64_t p = cfg_.patchify;
  if (latent_grid.h % p != 0 || latent_grid.w % p != 0 || latent_grid.t_a % p != 0 ||
      latent_grid.m % p != 0)
    throw ContractError("grid extents must be divisible by patchify");
  return GridSpec{latent_grid.t_v, latent_grid.h / p, latent_grid.w / p, latent_grid.t_a / p,
                  latent_grid.m / p};
}

Tensor Model::linear(const Tensor& x, const std::string& prefix) const {
  return add_bias(matmul(x, param(prefix + ".w")), param(prefix + ".b"));
}

TokenBatch Model::embed(const Tensor& audio_latent, const Tensor& video_latent,
                        AudioIdStrategy strategy, const GridSpec& latent_grid) const {
  const GridSpec tg = token_grid(latent_grid);
  Tensor video_rows = patchify_video(video_latent, latent_grid, cfg_.patchify, cfg_.video_channels);
  Tensor audio_rows = patchify_audio(audio_latent, latent_grid, cfg_.patchify, cfg_.audio_channels);
  Tensor video_tok = linear(video_rows, "video_embed");
  Tensor audio_tok = linear(audio_rows, "audio_embed");

  TokenBatch batch;
  batch.grid = tg;
  batch.tokens = concat_rows({video_tok, audio_tok});
  const auto vid_ids = video_position_ids(tg);
  const auto aud_ids = audio_position_ids(strategy, tg);
  batch.ids = vid_ids;
  batch.ids.insert(batch.ids.end(), aud_ids.begin(), aud_ids.end());
  batch.mask.assign(static_cast<size_t>(tg.video_tokens()), Modality::kVideo);
  batch.mask.insert(batch.mask.end(), static_cast<size_t>(tg.audio_tokens()), Modality::kAudio);
  return batch;
}

TokenBatch Model::embed_audio_only(const Tensor& audio_latent, AudioIdStrategy strategy,
                                   const GridSpec& latent_grid) const {
  const GridSpec tg = token_grid(latent_grid);
  Tensor audio_rows = patchify_audio(audio_latent, latent_grid, cfg_.patchify, cfg_.audio_channels);
  TokenBatch batch;
  batch.grid = tg;
  batch.tokens = linear(audio_rows, "audio_embed");
  batch.ids = audio_position_ids(strategy, tg);
  batch.mask.assign(static_cast<size_t>(tg.audio_tokens()), Modality::kAudio);
  return batch;
}

Model::CondContext Model::condition(const ConditionInput& cond) const {
  if (cond.class_id < 0 || cond.class_id >= cfg_.n_classes)
    throw ContractError("class_id out of range");
  if (!std::isfinite(cond.t)) throw ContractError("timestep must be finite");
  const int64_t d = cfg_.model_dim;

  // Sinusoidal timestep features (constant with respect to parameters).
  std::vector<double> sin_vals(static_cast<size_t>(d), 0.0);
  const double ts = cond.t * kTimeScale;
  for (int64_t j = 0; j < d / 2; ++j) {
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(d));
    sin_vals[static_cast<size_t>(2 * j)] = std::sin(ts * freq);
    sin_vals[static_cast<size_t>(2 * j + 1)] = std::cos(ts * freq);
  }
  Tensor t_embed = Tensor::from_values({1, d}, std::move(sin_vals));
  Tensor c_embed = gather_rows(param("class_embed.w"), {cond.class_id});
  Tensor hidden = gelu(add_bias(matmul(add(t_embed, c_embed), param("cond.w1")), param("cond.b1")));

  CondContext cc;
  for (int64_t i = 0; i < cfg_.n_layers; ++i) {
    const std::string pf = "block" + std::to_string(i) + ".mod";
    Tensor mod = add_bias(matmul(hidden, param(pf + ".w")), param(pf + ".b"));  // [1 x 2d]
    cc.scale.push_back(reshape(col_slice(mod, 0, d), {d}));
    cc.shift.push_back(reshape(col_slice(mod, d, d), {d}));
  }
  return cc;
}

Tensor Model::ffn(const Tensor& x, const std::string& prefix) const {
  Tensor h = gelu(add_bias(matmul_with_lora(x, prefix + ".w1"), param(prefix + ".b1")));
  return add_bias(matmul_with_lora(h, prefix + ".w2"), param(prefix + ".b2"));
}

Tensor Model::block_impl(int64_t layer, const Tensor& x, const std::vector<Modality>& mask,
                         const std::vector<PositionTriple>& ids, const CondContext& cc) const {
  const std::string pf = "block" + std::to_string(layer) + ".";
  const int64_t n = x.dim(0);
  const int64_t d = cfg_.model_dim;
  const int64_t hd = cfg_.head_dim();
  const RopeConfig rope_cfg = cfg_.rope();
  if (static_cast<int64_t>(mask.size()) != n || static_cast<int64_t>(ids.size()) != n)
    throw ContractError("token batch metadata does not match token count");

  Tensor one_plus_scale = add_scalar(cc.scale[static_cast<size_t>(layer)], 1.0);
  const Tensor& shift = cc.shift[static_cast<size_t>(layer)];

  // Attention sublayer (pre-norm, modulated).
  Tensor xn = layer_norm(x, param(pf + "norm1.g"), param(pf + "norm1.b"), kLnEps);
  xn = add_bias(mul_rows(xn, one_plus_scale), shift);
  Tensor q = add_bias(matmul_with_lora(xn, pf + "attn.wq"), param(pf + "attn.bq"));
  Tensor k = add_bias(matmul_with_lora(xn, pf + "attn.wk"), param(pf + "attn.bk"));
  Tensor v = add_bias(matmul_with_lora(xn, pf + "attn.wv"), param(pf + "attn.bv"));
  std::vector<Tensor> head_outs;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int64_t h = 0; h < cfg_.n_heads; ++h) {
    Tensor qh = apply_rotary(col_slice(q, h * hd, hd), ids, rope_cfg);
    Tensor kh = apply_rotary(col_slice(k, h * hd, hd), ids, rope_cfg);
    Tensor vh = col_slice(v, h * hd, hd);
    Tensor attn = softmax_rows(mul_scalar(matmul(qh, transpose(kh)), scale));
    head_outs.push_back(matmul(attn, vh));
  }
  Tensor attn_out =
      add_bias(matmul_with_lora(concat_cols(head_outs), pf + "attn.wo"), param(pf + "attn.bo"));
  Tensor x1 = add(x, attn_out);

  // FFN sublayer with deterministic modality routing.
  Tensor xn2 = layer_norm(x1, param(pf + "norm2.g"), param(pf + "norm2.b"), kLnEps);
  xn2 = add_bias(mul_rows(xn2, one_plus_scale), shift);
  Tensor ffn_out;
  if (cfg_.variant == FfnVariant::kSharedFfn) {
    ffn_out = ffn(xn2, pf + "ffn");
  } else {
    std::vector<int64_t> vid_idx, aud_idx;
    for (int64_t i = 0; i < n; ++i)
      (mask[static_cast<size_t>(i)] == Modality::kVideo ? vid_idx : aud_idx).push_back(i);
    Tensor video_out = ffn(gather_rows(xn2, vid_idx), pf + "video_ffn");
    Tensor audio_out = ffn(gather_rows(xn2, aud_idx), pf + "audio_ffn");
    Tensor cat = concat_rows({video_out, audio_out});
    std::vector<int64_t> perm(static_cast<size_t>(n));
    int64_t vi = 0, ai = static_cast<int64_t>(vid_idx.size());
    for (int64_t i = 0; i < n; ++i)
      perm[static_cast<size_t>(i)] = mask[static_cast<size_t>(i)] == Modality::kVideo ? vi++ : ai++;
    ffn_out = gather_rows(cat, perm);
  }
  return add(x1, ffn_out);
}

TokenBatch Model::block_forward(int64_t layer, const TokenBatch& batch,
                                const ConditionInput& cond) const {
  if (layer < 0 || layer >= cfg_.n_layers) throw ContractError("layer index out of range");
  const CondContext cc = condition(cond);
  TokenBatch out = batch;
  out.tokens = block_impl(layer, batch.tokens, batch.mask, batch.ids, cc);
  return out;
}

Tensor Model::forward_tokens(const TokenBatch& batch, const ConditionInput& cond) const {
  const CondContext cc = condition(cond);
  Tensor x = batch.tokens;
  for (int64_t i = 0; i < cfg_.n_layers; ++i) x = block_impl(i, x, batch.mask, batch.ids, cc);
  return layer_norm(x, param("final_norm.g"), param("final_norm.b"), kLnEps);
}

std::pair<Tensor, Tensor> Model::forward(const Tensor& audio_xt, const Tensor& video_xt,
                                         const ConditionInput& cond, AudioIdStrategy strategy,
                                         const GridSpec& latent_grid) const {
  TokenBatch batch = embed(audio_xt, video_xt, strategy, latent_grid);
  Tensor y = forward_tokens(batch, cond);
  const int64_t n_video = batch.grid.video_tokens();
  const int64_t n_audio = batch.grid.audio_tokens();
  std::vector<int64_t> vid_rows(static_cast<size_t>(n_video));
  std::vector<int64_t> aud_rows(static_cast<size_t>(n_audio));
  for (int64_t i = 0; i < n_video; ++i) vid_rows[static_cast<size_t>(i)] = i;
  for (int64_t i = 0; i < n_audio; ++i) aud_rows[static_cast<size_t>(i)] = n_video + i;
  Tensor vhat_video = unpatchify_video(linear(gather_rows(y, vid_rows), "video_head"), latent_grid,
                                       cfg_.patchify, cfg_.video_channels);
  Tensor vhat_audio = unpatchify_audio(linear(gather_rows(y, aud_rows), "audio_head"), latent_grid,
                                       cfg_.patchify, cfg_.audio_channels);
  return {vhat_audio, vhat_video};
}

Tensor Model::forward_audio(const Tensor& audio_xt, const ConditionInput& cond,
                            AudioIdStrategy strategy, const GridSpec& latent_grid) const {
  TokenBatch batch = embed_audio_only(audio_xt, strategy, latent_grid);
  Tensor y = forward_tokens(batch, cond);
  return unpatchify_audio(linear(y, "audio_head"), latent_grid, cfg_.patchify,
                          cfg_.audio_channels);
}

ParamCount Model::count_params(const ModelConfig& cfg) {
  cfg.validate();
  ParamCount pc;
  for (const auto& spec : enumerate_base_params(cfg)) pc.total += shape_numel(spec.shape);

  int64_t lora_total = 0;
  int64_t lora_per_ffn = 0;
  if (cfg.lora.enabled()) {
    const int64_t r = cfg.lora.rank;
    const int64_t d = cfg.model_dim;
    const int64_t f = cfg.ffn_dim;
    for (int64_t i = 0; i < cfg.n_layers; ++i) lora_total += 4 * (d * r + r * d);
    if (cfg.lora.placement == LoraPlacement::kAttnFfn) {
      // w1 [d x f]: A f*r + B r*d; w2 [f x d]: A d*r + B r*f
      lora_per_ffn = r * (2 * d + 2 * f);
      const int64_t experts = cfg.variant == FfnVariant::kMsMoe ? 2 : 1;
      lora_total += cfg.n_layers * experts * lora_per_ffn;
    }
  }
  pc.total += lora_total;

  // Each token traverses one expert; the other expert (and its adapters)
  // is the only non-activated parameter mass.
  int64_t skipped = 0;
  if (cfg.variant == FfnVariant::kMsMoe)
    skipped = cfg.n_layers * (ffn_param_count(cfg) + lora_per_ffn);
  pc.activated_per_token = pc.total - skipped;
  return pc;
}

Tensor Model::matmul_with_lora(const Tensor& x, const std::string& weight_name) const {
  Tensor y = matmul(x, param(weight_name));
  const auto it = adapters_.find(weight_name);
  if (it == adapters_.end()) return y;
  const Adapter& ad = it->second;
  const Tensor& a = params_[static_cast<size_t>(ad.a_index)].tensor;  // [d_out x r]
  const Tensor& b = params_[static_cast<size_t>(ad.b_index)].tensor;  // [r x d_in]
  Tensor delta = matmul(matmul(x, transpose(b)), transpose(a));
  return add(y, mul_scalar(delta, ad.alpha / static_cast<double>(ad.rank)));
}

void Model::apply_lora(const LoraSpec& spec, uint64_t seed) {
  if (!spec.enabled()) throw ContractError("apply_lora requires a positive rank");
  if (!adapters_.empty()) throw ContractError("adapters already applied");
  Rng rng(mix_seed(seed, 0x6c6f7261ULL));
  for (const auto& weight_name : lora_target_weights(cfg_, spec.placement)) {
    const Tensor w = param(weight_name);
    const int64_t d_in = w.dim(0), d_out = w.dim(1);
    if (spec.rank >= std::min(d_in, d_out))
      throw ContractError("lora rank must be below min(d_in, d_out) for '" + weight_name + "'");
    // B random, A zero: the delta vanishes at initialization.
    Tensor b = add_param("lora." + weight_name + ".b", {spec.rank, d_in},
                         rng.normal_vec(static_cast<size_t>(spec.rank * d_in), kInitStd));
    Tensor a = add_param("lora." + weight_name + ".a", {d_out, spec.rank},
                         std::vector<double>(static_cast<size_t>(d_out * spec.rank), 0.0));
    adapters_[weight_name] = Adapter{index_.at("lora." + weight_name + ".a"),
                                     index_.at("lora." + weight_name + ".b"), spec.alpha,
                                     spec.rank};
  }
  cfg_.lora = spec;
}

void Model::merge_lora() {
  if (adapters_.empty()) throw ContractError("no adapters to merge");
  NoGradGuard no_grad;
  for (const auto& [weight_name, ad] : adapters_) {
    Tensor w = param(weight_name);  // [d_in x d_out]
    const Tensor& a = params_[static_cast<size_t>(ad.a_index)].tensor;
    const Tensor& b = params_[static_cast<size_t>(ad.b_index)].tensor;
    const int64_t d_in = w.dim(0), d_out = w.dim(1), r = ad.rank;
    auto wv = w.mutable_values();
    const auto av = a.values();
    const auto bv = b.values();
    const double s = ad.alpha / static_cast<double>(r);
    // W += s * (A B)^T, i.e. W[i][o] += s * sum_k A[o][k] B[k][i]
    for (int64_t i = 0; i < d_in; ++i)
      for (int64_t o = 0; o < d_out; ++o) {
        double acc = 0.0;
        for (int64_t k = 0; k < r; ++k)
          acc += av[static_cast<size_t>(o * r + k)] * bv[static_cast<size_t>(k * d_in + i)];
        wv[static_cast<size_t>(i * d_out + o)] += s * acc;
      }
  }
  adapters_.clear();
  // Drop adapter parameters from the store.
  std::vector<Parameter> kept;
  for (auto& p : params_)
    if (p.name.rfind("lora.", 0) != 0) kept.push_back(std::move(p));
  params_ = std::move(kept);
  index_.clear();
  for (size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = static_cast<int64_t>(i);
  cfg_.lora.rank = 0;
}

std::vector<std::string> Model::lora_param_names() const {
  std::vector<std::string> out;
  for (const auto& p : params_)
    if (p.name.rfind("lora.", 0) == 0) out.push_back(p.name);
  return out;
}

void Model::save_checkpoint(const std::string& path) const {
  Container c;
  c.meta = {{"kind", "model-checkpoint"}, {"format", 1}, {"config", model_config_to_json(cfg_)}};
  for (const auto& p : params_) c.add(p.name, p.tensor);
  c.save(path);
}

Model Model::load_checkpoint(const std::string& path) {
  Container c = Container::load(path);
  if (c.meta.value("kind", "") != "model-checkpoint")
    throw ContractError("'" + path + "' is not a model checkpoint");
  Model model(model_config_from_json(c.meta.at("config")), 0);
  if (c.arrays().size() != model.params_.size())
    throw ContractError("checkpoint parameter count mismatch");
  for (auto& p : model.params_) {
    const auto& arr = c.get(p.name);
    if (arr.shape != p.tensor.shape())
      throw ContractError("checkpoint shape mismatch for '" + p.name + "'");
    std::copy(arr.data.begin(), arr.data.end(), p.tensor.mutable_values().begin());
  }
  return model;
}

Model Model::clone() const {
  Model copy(cfg_, 0);
  for (size_t i = 0; i < params_.size(); ++i)
    std::copy(params_[i].tensor.values().begin(), params_[i].tensor.values().end(),
              copy.params_[i].tensor.mutable_values().begin());
  return copy;
}

uint64_t Model::param_hash() const { return param_hash(""); }

uint64_t Model::param_hash(const std::string& name_prefix_filter) const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    if (!name_prefix_filter.empty() && p.name.find(name_prefix_filter) == std::string::npos)
      continue;
    const uint64_t vh = hash_doubles(p.tensor.values());
    const uint64_t nh =
        fnv1a64({reinterpret_cast<const uint8_t*>(p.name.data()), p.name.size()});
    h ^= vh + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h ^= nh + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  }
  return h;
}

}  // namespace avflow
