// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0
//
// avflow command-line tool. Config precedence: flags > --config file >
// built-in defaults. Exit codes: 0 success, 2 usage/config error,
// 3 numerical failure.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "avflow.h"

namespace {

struct CommonOpts {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> strategy;
  std::optional<std::string> stage;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "JSON config or run manifest");
  cmd->add_option("--seed", opts.seed, "Run seed (overrides config)");
  cmd->add_option("--out", opts.out_dir, "Output directory (overrides config)");
  cmd->add_option("--strategy", opts.strategy,
                  "Audio position-ID strategy: vanilla|interpolate|interleave|interleave-offset");
  cmd->add_option("--stage", opts.stage, "Training stage: audio|av|dpo");
}

// Builds the effective config JSON: file (if given) with flag overrides.
int build_config(const CommonOpts& opts, std::string& out_json) {
  nlohmann::json doc = nlohmann::json::object();
  if (!opts.config_path.empty()) {
    std::ifstream is(opts.config_path);
    if (!is) {
      std::cerr << "error: cannot open config file '" << opts.config_path << "'\n";
      return 2;
    }
    try {
      is >> doc;
    } catch (const nlohmann::json::exception& e) {
      std::cerr << "error: bad JSON in '" << opts.config_path << "': " << e.what() << "\n";
      return 2;
    }
    // Accept manifests directly.
    if (doc.contains("config") && doc.contains("artifact")) doc = doc.at("config");
  }
  if (opts.seed) doc["seed"] = *opts.seed;
  if (opts.out_dir) doc["out_dir"] = *opts.out_dir;
  if (opts.strategy) doc["rope_strategy"] = *opts.strategy;
  if (opts.stage) doc["stage"] = *opts.stage;
  out_json = doc.dump();
  return 0;
}

int open_run(const CommonOpts& opts, avf_run** run) {
  std::string config_json;
  if (int rc = build_config(opts, config_json); rc != 0) return rc;
  const avf_status status = avf_run_create(config_json.c_str(), run);
  if (status != AVF_OK) {
    std::cerr << "error: " << avf_last_error(nullptr) << "\n";
    return static_cast<int>(status);
  }
  return 0;
}

int finish(avf_run* run, avf_status status, const std::string& what) {
  if (status != AVF_OK) std::cerr << "error: " << what << ": " << avf_last_error(run) << "\n";
  avf_run_destroy(run);
  return static_cast<int>(status);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"avflow: toy joint audio-video generation with rectified flows"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(avf_version()));

  CommonOpts opts;

  auto* train_flow = app.add_subcommand("train-flow", "Train the audio or audio-video flow stage");
  add_common(train_flow, opts);

  auto* train_dpo =
      app.add_subcommand("train-dpo", "Preference-optimize a checkpoint on a pairs file");
  add_common(train_dpo, opts);
  std::string dpo_checkpoint, dpo_pairs;
  train_dpo->add_option("--checkpoint", dpo_checkpoint, "Input checkpoint")->required();
  train_dpo->add_option("--pairs", dpo_pairs, "pairs.jsonl from make-pairs")->required();

  auto* make_pairs =
      app.add_subcommand("make-pairs", "Sample candidates and select preference pairs");
  add_common(make_pairs, opts);
  std::string mp_checkpoint;
  int64_t mp_prompts = 16, mp_candidates = 3;
  make_pairs->add_option("--checkpoint", mp_checkpoint, "Sampler checkpoint")->required();
  make_pairs->add_option("--n-prompts", mp_prompts, "Prompt count (default 16)");
  make_pairs->add_option("--candidates", mp_candidates, "Generated candidates per prompt (default 3)");

  auto* ablate = app.add_subcommand("ablate-rope", "Position-ID strategy ablation report");
  add_common(ablate, opts);

  auto* eval = app.add_subcommand("eval", "Sample a checkpoint and report toy metrics");
  add_common(eval, opts);
  std::string eval_checkpoint;
  int64_t eval_prompts = 8;
  eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint to evaluate")->required();
  eval->add_option("--n-prompts", eval_prompts, "Prompt count (default 8)");

  auto* grad = app.add_subcommand("grad-check", "Validate analytic gradients numerically");
  add_common(grad, opts);

  auto* dump = app.add_subcommand("dump-config", "Print the default config JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (dump->parsed()) {
    char* json = avf_default_config();
    std::cout << json << "\n";
    avf_string_free(json);
    return 0;
  }

  avf_run* run = nullptr;
  if (int rc = open_run(opts, &run); rc != 0) return rc;

  if (train_flow->parsed()) return finish(run, avf_run_train_flow(run), "train-flow");

  if (train_dpo->parsed())
    return finish(run, avf_run_train_dpo(run, dpo_checkpoint.c_str(), dpo_pairs.c_str()),
                  "train-dpo");

  if (make_pairs->parsed())
    return finish(run, avf_run_make_pairs(run, mp_checkpoint.c_str(), mp_prompts, mp_candidates),
                  "make-pairs");

  if (ablate->parsed()) return finish(run, avf_run_ablate_rope(run), "ablate-rope");

  if (eval->parsed())
    return finish(run, avf_run_eval(run, eval_checkpoint.c_str(), eval_prompts), "eval");

  if (grad->parsed()) {
    double fm_err = 0.0, dpo_err = 0.0;
    const avf_status status = avf_run_grad_check(run, &fm_err, &dpo_err);
    nlohmann::json j = {{"fm_max_rel_err", fm_err},
                        {"dpo_max_rel_err", dpo_err},
                        {"tolerance", 1e-4},
                        {"ok", status == AVF_OK}};
    std::cout << j.dump(2) << "\n";
    return finish(run, status, "grad-check");
  }

  avf_run_destroy(run);
  return 2;
}
