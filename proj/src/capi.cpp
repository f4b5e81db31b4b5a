// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "avflow.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include "run/run.hpp"

using namespace avflow;

struct avf_run {
  RunConfig config;
  std::string last_error;
};

namespace {

thread_local std::string g_create_error;

template <typename Fn>
avf_status guarded(avf_run* run, Fn&& fn) {
  try {
    fn();
    run->last_error.clear();
    return AVF_OK;
  } catch (const NumericError& e) {
    run->last_error = e.what();
    return AVF_ERR_NUMERIC;
  } catch (const std::exception& e) {
    run->last_error = e.what();
    return AVF_ERR_CONFIG;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* avf_version(void) { return "0.1.0"; }

char* avf_default_config(void) { return dup_string(default_run_config_json().dump(2)); }

void avf_string_free(char* str) { std::free(str); }

avf_status avf_run_create(const char* config_json, avf_run** out) {
  if (out == nullptr) return AVF_ERR_CONFIG;
  *out = nullptr;
  if (config_json == nullptr) {
    g_create_error = "config JSON is null";
    return AVF_ERR_CONFIG;
  }
  try {
    const auto j = nlohmann::json::parse(config_json);
    auto run = new avf_run{run_config_from_json(j), {}};
    *out = run;
    g_create_error.clear();
    return AVF_OK;
  } catch (const std::exception& e) {
    g_create_error = e.what();
    return AVF_ERR_CONFIG;
  }
}

void avf_run_destroy(avf_run* run) { delete run; }

const char* avf_last_error(const avf_run* run) {
  return run ? run->last_error.c_str() : g_create_error.c_str();
}

avf_status avf_run_train_flow(avf_run* run) {
  if (!run) return AVF_ERR_CONFIG;
  return guarded(run, [&] { run_train_flow(run->config); });
}

avf_status avf_run_make_pairs(avf_run* run, const char* checkpoint_path, int64_t n_prompts,
                              int64_t n_candidates) {
  if (!run) return AVF_ERR_CONFIG;
  return guarded(run, [&] {
    if (!checkpoint_path) throw ConfigError("checkpoint path is null");
    run_make_pairs(run->config, checkpoint_path, n_prompts, n_candidates);
  });
}

avf_status avf_run_train_dpo(avf_run* run, const char* checkpoint_path, const char* pairs_path) {
  if (!run) return AVF_ERR_CONFIG;
  return guarded(run, [&] {
    if (!checkpoint_path || !pairs_path) throw ConfigError("checkpoint/pairs path is null");
    run_train_dpo(run->config, checkpoint_path, pairs_path);
  });
}

avf_status avf_run_ablate_rope(avf_run* run) {
  if (!run) return AVF_ERR_CONFIG;
  return guarded(run, [&] { run_ablate_rope(run->config); });
}

avf_status avf_run_eval(avf_run* run, const char* checkpoint_path, int64_t n_prompts) {
  if (!run) return AVF_ERR_CONFIG;
  return guarded(run, [&] {
    if (!checkpoint_path) throw ConfigError("checkpoint path is null");
    run_eval(run->config, checkpoint_path, n_prompts);
  });
}

avf_status avf_run_grad_check(avf_run* run, double* fm_max_rel_err, double* dpo_max_rel_err) {
  if (!run) return AVF_ERR_CONFIG;
  GradCheckResult result;
  const avf_status status = guarded(run, [&] { result = run_grad_check(run->config); });
  if (status != AVF_OK) return status;
  if (fm_max_rel_err) *fm_max_rel_err = result.fm_max_rel_err;
  if (dpo_max_rel_err) *dpo_max_rel_err = result.dpo_max_rel_err;
  if (result.fm_max_rel_err > 1e-4 || result.dpo_max_rel_err > 1e-4) {
    run->last_error = "analytic gradients disagree with central differences";
    return AVF_ERR_NUMERIC;
  }
  return AVF_OK;
}

}  // extern "C"
