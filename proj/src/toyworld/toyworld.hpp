// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic paired audio-video latents with controllable synchrony.
//
// A sample is driven by an event script: each event frame carries a bright
// patch in the video latent and a full-column spike at the matching audio
// step (optionally shifted by offset_steps to inject desynchronization).
// Threshold detection on these structures gives an exact, integer-accurate
// synchrony metric on clean samples, and template MSE gives reward scores
// for preference-pair construction.

#pragma once

#include <cstdint>
#include <vector>

#include "core/tensor.hpp"
#include "preference/reward.hpp"
#include "rope/rope.hpp"

namespace avflow {

struct ToyWorldConfig {
  GridSpec grid{8, 4, 4, 32, 8};
  int64_t video_channels = 2;
  int64_t audio_channels = 2;
  int64_t n_classes = 9;  // class id = event count, clamped
  double noise_sigma = 0.05;
};

struct EventScript {
  std::vector<int64_t> event_frames;  // strictly increasing, in [0, T_v)
  int64_t class_id = 0;
};

struct ToySample {
  Tensor video;  // [T_v x H x W x C_v]
  Tensor audio;  // [T_a x M x C_a]
  EventScript script;
  int64_t offset_steps = 0;
};

struct SyncReport {
  double desync_steps = 0.0;
  int64_t video_events_detected = 0;
  int64_t audio_events_detected = 0;
  bool detection_failed = false;  // no events found in some modality
};

class ToyWorld {
 public:
  explicit ToyWorld(ToyWorldConfig cfg = {});

  const ToyWorldConfig& config() const { return cfg_; }

  // Deterministic in all arguments. Event frames are drawn without
  // replacement; audio spikes land at round(f * T_a / T_v) + offset_steps.
  ToySample generate_sample(uint64_t seed, int64_t n_events, int64_t offset_steps) const;

  // Noiseless value fields for a script.
  Tensor video_template(const EventScript& script) const;
  Tensor audio_template(const EventScript& script, int64_t offset_steps) const;

  // Expected audio step for a video event frame.
  int64_t audio_step_for_frame(int64_t frame) const;

  // Threshold detection plus mean nearest-spike distance in audio steps.
  // Reports T_a with the failure flag when either modality has no
  // detectable events.
  SyncReport desync(const Tensor& audio, const Tensor& video) const;

  // Raw (unnormalized) rewards for a generated pair against the script's
  // clean templates: audio = -MSE, video = {-MSE, -|event count error|},
  // av = -desync.
  RewardVector rewards(const Tensor& gen_audio, const Tensor& gen_video,
                       const EventScript& script) const;

  Shape audio_shape() const;
  Shape video_shape() const;

 private:
  std::vector<int64_t> detect_video_events(const Tensor& video) const;
  std::vector<int64_t> detect_audio_spikes(const Tensor& audio) const;

  ToyWorldConfig cfg_;
  int64_t patch_h0_, patch_h1_, patch_w0_, patch_w1_;  // bright sub-window
};

}  // namespace avflow
