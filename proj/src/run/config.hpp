// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one JSON document drives every command. Defaults are
// complete; user files override by deep merge; unknown keys are rejected.

#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "model/model.hpp"
#include "preference/preference.hpp"
#include "rope/rope.hpp"

namespace avflow {

// Configuration/usage errors map to process exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class RunStage { kAudioPretrain, kAvSft, kAvDpo };

const char* stage_name(RunStage s);
RunStage parse_stage(const std::string& name);

struct DataConfig {
  int64_t n_events_min = 1;
  int64_t n_events_max = 2;
  double noise_sigma = 0.05;
};

struct FlowRunConfig {
  double lr = 0.05;
  double momentum = 0.9;
  int64_t steps = 2000;
  int64_t log_every = 100;  // stdout progress cadence; JSONL is per-step
};

struct DpoRunConfig {
  double beta_a = 1000.0;
  double beta_v = 3000.0;
  double fm_reg_weight = 1.0;
  double lr = 1e-5;
  double momentum = 0.0;
  int64_t steps = 200;
  int64_t eval_every = 25;
  RankStrategy rank;
};

struct AblateConfig {
  int64_t seeds = 5;
  int64_t eval_prompts = 8;
};

struct RunConfig {
  uint64_t seed = 0;
  std::string out_dir = "out";
  RunStage stage = RunStage::kAvSft;
  AudioIdStrategy rope_strategy = AudioIdStrategy::kInterleaveOffset;
  GridSpec grid{8, 4, 4, 32, 8};
  ModelConfig model;
  DataConfig data;
  FlowRunConfig flow;
  SamplerConfig sampler;
  DpoRunConfig dpo;
  AblateConfig ablate;
  int64_t eval_prompts = 8;

  void validate() const;
};

// The complete default document (every known key present).
nlohmann::json default_run_config_json();

// Deep-merges `user` over the defaults, rejecting unknown keys, then
// parses. Accepts a run manifest as well (its "config" object is used).
RunConfig run_config_from_json(const nlohmann::json& user);

nlohmann::json run_config_to_json(const RunConfig& cfg);

// Reads a config or manifest file.
RunConfig load_run_config(const std::string& path);

}  // namespace avflow
