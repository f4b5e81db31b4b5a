// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "run/config.hpp"

#include <fstream>

namespace avflow {

const char* stage_name(RunStage s) {
  switch (s) {
    case RunStage::kAudioPretrain: return "audio";
    case RunStage::kAvSft: return "av";
    case RunStage::kAvDpo: return "dpo";
  }
  throw ConfigError("unknown stage");
}

RunStage parse_stage(const std::string& name) {
  if (name == "audio") return RunStage::kAudioPretrain;
  if (name == "av") return RunStage::kAvSft;
  if (name == "dpo") return RunStage::kAvDpo;
  throw ConfigError("unknown stage '" + name + "' (expected audio, av, or dpo)");
}

nlohmann::json default_run_config_json() {
  return nlohmann::json{
      {"seed", 0},
      {"out_dir", "out"},
      {"stage", "av"},
      {"rope_strategy", "interleave-offset"},
      {"grid", {{"t_v", 8}, {"h", 4}, {"w", 4}, {"t_a", 32}, {"m", 8}}},
      {"model",
       {{"n_layers", 2},
        {"model_dim", 16},
        {"n_heads", 2},
        {"ffn_dim", 32},
        {"n_classes", 9},
        {"audio_channels", 2},
        {"video_channels", 2},
        {"patchify", 1},
        {"variant", "msmoe"},
        {"rope_base", 10000.0},
        {"rope_split", nullptr},
        {"lora", {{"rank", 0}, {"alpha", 1.0}, {"placement", "attn"}}}}},
      {"data", {{"n_events_min", 1}, {"n_events_max", 2}, {"noise_sigma", 0.05}}},
      {"flow", {{"lr", 0.05}, {"momentum", 0.9}, {"steps", 2000}, {"log_every", 100}}},
      {"sampler", {{"n_steps", 16}}},
      {"dpo",
       {{"beta_a", 1000.0},
        {"beta_v", 3000.0},
        {"fm_reg_weight", 1.0},
        {"lr", 1e-5},
        {"momentum", 0.0},
        {"steps", 200},
        {"eval_every", 25},
        {"rank_scheme", "modality-micro"},
        {"normalized", true},
        {"with_gt", true}}},
      {"ablate", {{"seeds", 5}, {"eval_prompts", 8}}},
      {"eval", {{"n_prompts", 8}}}};
}

namespace {

void merge_into(nlohmann::json& base, const nlohmann::json& user, const std::string& path) {
  if (!user.is_object())
    throw ConfigError("config section '" + (path.empty() ? "<root>" : path) +
                      "' must be a JSON object");
  for (const auto& [key, value] : user.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + here + "'");
    auto& slot = base[key];
    if (slot.is_object() && value.is_object())
      merge_into(slot, value, here);
    else if (slot.is_object() || (value.is_object() && !slot.is_null()))
      throw ConfigError("config key '" + here + "' has the wrong type");
    else
      slot = value;
  }
}

template <typename T>
T get(const nlohmann::json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key '" + std::string(key) + "': " + e.what());
  }
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& user) {
  nlohmann::json doc = default_run_config_json();
  nlohmann::json effective = user;
  if (user.contains("config") && user.contains("artifact")) effective = user.at("config");
  merge_into(doc, effective, "");

  RunConfig cfg;
  cfg.seed = get<uint64_t>(doc, "seed");
  cfg.out_dir = get<std::string>(doc, "out_dir");
  cfg.stage = parse_stage(get<std::string>(doc, "stage"));
  try {
    cfg.rope_strategy = parse_strategy(get<std::string>(doc, "rope_strategy"));
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }

  const auto& g = doc.at("grid");
  cfg.grid = {get<int64_t>(g, "t_v"), get<int64_t>(g, "h"), get<int64_t>(g, "w"),
              get<int64_t>(g, "t_a"), get<int64_t>(g, "m")};

  try {
    cfg.model = model_config_from_json(doc.at("model"));
  } catch (const ContractError& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }

  const auto& d = doc.at("data");
  cfg.data = {get<int64_t>(d, "n_events_min"), get<int64_t>(d, "n_events_max"),
              get<double>(d, "noise_sigma")};

  const auto& f = doc.at("flow");
  cfg.flow = {get<double>(f, "lr"), get<double>(f, "momentum"), get<int64_t>(f, "steps"),
              get<int64_t>(f, "log_every")};

  cfg.sampler.n_steps = get<int64_t>(doc.at("sampler"), "n_steps");

  const auto& p = doc.at("dpo");
  cfg.dpo.beta_a = get<double>(p, "beta_a");
  cfg.dpo.beta_v = get<double>(p, "beta_v");
  cfg.dpo.fm_reg_weight = get<double>(p, "fm_reg_weight");
  cfg.dpo.lr = get<double>(p, "lr");
  cfg.dpo.momentum = get<double>(p, "momentum");
  cfg.dpo.steps = get<int64_t>(p, "steps");
  cfg.dpo.eval_every = get<int64_t>(p, "eval_every");
  try {
    cfg.dpo.rank.scheme = parse_rank_scheme(get<std::string>(p, "rank_scheme"));
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  cfg.dpo.rank.normalized = get<bool>(p, "normalized");
  cfg.dpo.rank.with_gt = get<bool>(p, "with_gt");

  const auto& a = doc.at("ablate");
  cfg.ablate = {get<int64_t>(a, "seeds"), get<int64_t>(a, "eval_prompts")};
  cfg.eval_prompts = get<int64_t>(doc.at("eval"), "n_prompts");

  cfg.validate();
  return cfg;
}

void RunConfig::validate() const {
  try {
    grid.validate();
    model.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  if (data.n_events_min < 0 || data.n_events_max < data.n_events_min ||
      data.n_events_max > grid.t_v)
    throw ConfigError("data.n_events range must satisfy 0 <= min <= max <= T_v");
  if (!(data.noise_sigma >= 0.0)) throw ConfigError("data.noise_sigma must be >= 0");
  if (flow.steps < 0 || flow.log_every < 1) throw ConfigError("flow.steps/log_every out of range");
  if (!(flow.lr >= 0.0) || !(flow.momentum >= 0.0 && flow.momentum < 1.0))
    throw ConfigError("flow optimizer settings out of range");
  if (sampler.n_steps < 1) throw ConfigError("sampler.n_steps must be >= 1");
  if (!(dpo.beta_a > 0.0) || !(dpo.beta_v > 0.0))
    throw ConfigError("dpo betas must be positive");
  if (!(dpo.fm_reg_weight >= 0.0)) throw ConfigError("dpo.fm_reg_weight must be >= 0");
  if (!(dpo.lr >= 0.0)) throw ConfigError("dpo.lr must be >= 0");
  if (dpo.steps < 0 || dpo.eval_every < 0) throw ConfigError("dpo.steps/eval_every out of range");
  if (ablate.seeds < 1 || ablate.eval_prompts < 1)
    throw ConfigError("ablate settings must be >= 1");
  if (eval_prompts < 1) throw ConfigError("eval.n_prompts must be >= 1");
  if (model.n_classes < data.n_events_max + 1)
    throw ConfigError("model.n_classes must cover the event-count vocabulary");
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json j = default_run_config_json();
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["stage"] = stage_name(cfg.stage);
  j["rope_strategy"] = strategy_name(cfg.rope_strategy);
  j["grid"] = {{"t_v", cfg.grid.t_v},
               {"h", cfg.grid.h},
               {"w", cfg.grid.w},
               {"t_a", cfg.grid.t_a},
               {"m", cfg.grid.m}};
  j["model"] = model_config_to_json(cfg.model);
  j["data"] = {{"n_events_min", cfg.data.n_events_min},
               {"n_events_max", cfg.data.n_events_max},
               {"noise_sigma", cfg.data.noise_sigma}};
  j["flow"] = {{"lr", cfg.flow.lr},
               {"momentum", cfg.flow.momentum},
               {"steps", cfg.flow.steps},
               {"log_every", cfg.flow.log_every}};
  j["sampler"] = {{"n_steps", cfg.sampler.n_steps}};
  j["dpo"] = {{"beta_a", cfg.dpo.beta_a},
              {"beta_v", cfg.dpo.beta_v},
              {"fm_reg_weight", cfg.dpo.fm_reg_weight},
              {"lr", cfg.dpo.lr},
              {"momentum", cfg.dpo.momentum},
              {"steps", cfg.dpo.steps},
              {"eval_every", cfg.dpo.eval_every},
              {"rank_scheme", rank_scheme_name(cfg.dpo.rank.scheme)},
              {"normalized", cfg.dpo.rank.normalized},
              {"with_gt", cfg.dpo.rank.with_gt}};
  j["ablate"] = {{"seeds", cfg.ablate.seeds}, {"eval_prompts", cfg.ablate.eval_prompts}};
  j["eval"] = {{"n_prompts", cfg.eval_prompts}};
  return j;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace avflow
