// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the CLI and the C API. Every command is a
// pure function of (config, inputs): outputs under out_dir are reproducible
// byte-for-byte for a fixed config and seed, and each run writes a manifest
// that can be fed back in as the config.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "run/config.hpp"
#include "toyworld/toyworld.hpp"

namespace avflow {

// Parameters trained at each stage: the audio stage updates only the
// audio-side modules (embedder, head, audio expert; the shared FFN when
// there is no audio expert); later stages update adapters when present,
// otherwise everything.
std::vector<Tensor> stage_trainable_params(const Model& model, RunStage stage);

ToyWorld make_world(const RunConfig& cfg);

struct TrainFlowResult {
  std::string checkpoint_path;
  std::string log_path;
  std::string manifest_path;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::string checkpoint_hash;
};
TrainFlowResult run_train_flow(const RunConfig& cfg);

struct MakePairsResult {
  std::string pairs_path;
  std::string latents_path;
  std::string manifest_path;
  int64_t n_pairs = 0;
  int64_t n_prompts = 0;
  double fraction_generated_winners = 0.0;
};
MakePairsResult run_make_pairs(const RunConfig& cfg, const std::string& checkpoint_path,
                               int64_t n_prompts, int64_t n_candidates);

struct TrainDpoResult {
  std::string checkpoint_path;
  std::string log_path;
  std::string manifest_path;
  double final_acc_audio = 0.0;
  double final_acc_video = 0.0;
  std::string checkpoint_hash;
};
TrainDpoResult run_train_dpo(const RunConfig& cfg, const std::string& checkpoint_path,
                             const std::string& pairs_path);

struct AblateRopeResult {
  std::string overlap_csv_path;
  std::string train_csv_path;
  std::string manifest_path;
};
AblateRopeResult run_ablate_rope(const RunConfig& cfg, bool skip_training = false);

struct EvalResult {
  std::string metrics_path;
  nlohmann::json metrics;
};
EvalResult run_eval(const RunConfig& cfg, const std::string& checkpoint_path, int64_t n_prompts);

struct GradCheckResult {
  double fm_max_rel_err = 0.0;
  double dpo_max_rel_err = 0.0;
};
// Runs central-difference checks for the flow and preference losses on a
// small fixed token grid, using the configured model dimensions.
GradCheckResult run_grad_check(const RunConfig& cfg);

// Pair-file loading (shared with tests and the DPO command).
std::vector<PreferencePair> load_pairs(const std::string& pairs_path,
                                       const std::string& latents_path);

}  // namespace avflow
