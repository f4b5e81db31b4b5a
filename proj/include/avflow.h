/* Copyright (c) 2026 The avflow Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the avflow engine: toy-scale joint audio-video generation
 * with rectified flows, temporally aligned rotary position IDs,
 * modality-expert transformer blocks, and preference optimization.
 *
 * Usage: build a JSON run configuration (avf_default_config documents every
 * key), create a run handle, and invoke commands. All outputs land under
 * the configured out_dir. Errors are reported as status codes with a
 * per-handle message; handles are not thread-safe.
 */

#ifndef AVFLOW_H
#define AVFLOW_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum avf_status {
  AVF_OK = 0,
  /* Bad usage: invalid config, malformed file, contract violation. */
  AVF_ERR_CONFIG = 2,
  /* Numerical failure: divergence / non-finite loss. */
  AVF_ERR_NUMERIC = 3
} avf_status;

/* Opaque run handle holding a validated configuration. */
typedef struct avf_run avf_run;

/* Library semantic version, e.g. "0.1.0". Static storage. */
const char* avf_version(void);

/* Complete default configuration as a JSON document. Caller frees with
 * avf_string_free. */
char* avf_default_config(void);

void avf_string_free(char* str);

/* Parses and validates a JSON config (or a run manifest; its "config"
 * object is used). On success *out owns the run. On failure *out is NULL
 * and avf_last_error(NULL) describes the problem. */
avf_status avf_run_create(const char* config_json, avf_run** out);

void avf_run_destroy(avf_run* run);

/* Message for the most recent failure on this handle; with NULL, the most
 * recent avf_run_create failure on this thread. Static/handle storage. */
const char* avf_last_error(const avf_run* run);

/* Trains the configured flow stage ("audio" or "av") on the synthetic
 * world; writes checkpoint.avck, train_log.jsonl, manifest.json. */
avf_status avf_run_train_flow(avf_run* run);

/* Samples n_candidates per prompt from a checkpoint, scores them with the
 * toy reward oracle, selects preference pairs; writes pairs.jsonl,
 * latents.avck, manifest.json. */
avf_status avf_run_make_pairs(avf_run* run, const char* checkpoint_path, int64_t n_prompts,
                              int64_t n_candidates);

/* Preference-optimizes a checkpoint against a frozen copy of itself using
 * a pairs file (latents.avck is looked up next to it); writes
 * checkpoint.avck, dpo_log.jsonl, manifest.json. */
avf_status avf_run_train_dpo(avf_run* run, const char* checkpoint_path, const char* pairs_path);

/* Position-ID ablation: overlap.csv over a grid sweep for all four audio
 * ID strategies, plus train.csv from per-strategy training runs. */
avf_status avf_run_ablate_rope(avf_run* run);

/* Samples from a checkpoint and writes metrics.json
 * {audio_mse, video_mse, desync_median, event_count_accuracy, ...}. */
avf_status avf_run_eval(avf_run* run, const char* checkpoint_path, int64_t n_prompts);

/* Central-difference validation of the analytic gradients of the flow and
 * preference losses. Writes the max relative errors through the out
 * pointers (may be NULL). Returns AVF_ERR_NUMERIC when either exceeds
 * 1e-4. */
avf_status avf_run_grad_check(avf_run* run, double* fm_max_rel_err, double* dpo_max_rel_err);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* AVFLOW_H */
