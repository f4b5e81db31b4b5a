// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "toyworld/toyworld.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "core/rng.hpp"

namespace avflow {

namespace {
constexpr double kDetectThreshold = 0.5;
}

ToyWorld::ToyWorld(ToyWorldConfig cfg) : cfg_(cfg) {
  cfg_.grid.validate();
  if (cfg_.video_channels < 1 || cfg_.audio_channels < 1)
    throw ContractError("toy world needs at least one channel per modality");
  // Bright patch: the centered half-extent sub-window.
  const int64_t ph = std::max<int64_t>(1, cfg_.grid.h / 2);
  const int64_t pw = std::max<int64_t>(1, cfg_.grid.w / 2);
  patch_h0_ = (cfg_.grid.h - ph) / 2;
  patch_h1_ = patch_h0_ + ph;
  patch_w0_ = (cfg_.grid.w - pw) / 2;
  patch_w1_ = patch_w0_ + pw;
}

Shape ToyWorld::audio_shape() const { return {cfg_.grid.t_a, cfg_.grid.m, cfg_.audio_channels}; }

Shape ToyWorld::video_shape() const {
  return {cfg_.grid.t_v, cfg_.grid.h, cfg_.grid.w, cfg_.video_channels};
}

int64_t ToyWorld::audio_step_for_frame(int64_t frame) const {
  return round_half_away(frame * cfg_.grid.t_a, cfg_.grid.t_v);
}

Tensor ToyWorld::video_template(const EventScript& script) const {
  const auto& g = cfg_.grid;
  Tensor out = Tensor::zeros(video_shape());
  auto vals = out.mutable_values();
  for (int64_t f : script.event_frames) {
    if (f < 0 || f >= g.t_v) throw ContractError("event frame out of range");
    for (int64_t hh = patch_h0_; hh < patch_h1_; ++hh)
      for (int64_t ww = patch_w0_; ww < patch_w1_; ++ww)
        for (int64_t c = 0; c < cfg_.video_channels; ++c)
          vals[static_cast<size_t>(((f * g.h + hh) * g.w + ww) * cfg_.video_channels + c)] = 1.0;
  }
  return out;
}

Tensor ToyWorld::audio_template(const EventScript& script, int64_t offset_steps) const {
  const auto& g = cfg_.grid;
  Tensor out = Tensor::zeros(audio_shape());
  auto vals = out.mutable_values();
  for (int64_t f : script.event_frames) {
    const int64_t s = audio_step_for_frame(f) + offset_steps;
    if (s < 0 || s >= g.t_a) continue;  // shifted outside the clip
    for (int64_t mm = 0; mm < g.m; ++mm)
      for (int64_t c = 0; c < cfg_.audio_channels; ++c)
        vals[static_cast<size_t>((s * g.m + mm) * cfg_.audio_channels + c)] = 1.0;
  }
  return out;
}

ToySample ToyWorld::generate_sample(uint64_t seed, int64_t n_events, int64_t offset_steps) const {
  const auto& g = cfg_.grid;
  if (n_events < 0 || n_events > g.t_v)
    throw ContractError("n_events must lie in [0, T_v]");
  if (std::abs(offset_steps) >= g.t_a)
    throw ContractError("offset_steps must satisfy |offset| < T_a");

  Rng rng(mix_seed(seed, 0x746f79ULL));
  ToySample sample;
  sample.offset_steps = offset_steps;
  sample.script.event_frames = rng.sample_without_replacement(g.t_v, n_events);
  sample.script.class_id = std::min<int64_t>(n_events, cfg_.n_classes - 1);

  sample.video = video_template(sample.script);
  sample.audio = audio_template(sample.script, offset_steps);
  for (auto& v : sample.video.mutable_values()) v += cfg_.noise_sigma * rng.normal();
  for (auto& v : sample.audio.mutable_values()) v += cfg_.noise_sigma * rng.normal();
  return sample;
}

std::vector<int64_t> ToyWorld::detect_video_events(const Tensor& video) const {
  if (video.shape() != video_shape())
    throw ContractError("video shape mismatch: got " + shape_str(video.shape()));
  const auto& g = cfg_.grid;
  const auto vals = video.values();
  std::vector<int64_t> frames;
  const double denom = static_cast<double>((patch_h1_ - patch_h0_) * (patch_w1_ - patch_w0_) *
                                           cfg_.video_channels);
  for (int64_t f = 0; f < g.t_v; ++f) {
    double acc = 0.0;
    for (int64_t hh = patch_h0_; hh < patch_h1_; ++hh)
      for (int64_t ww = patch_w0_; ww < patch_w1_; ++ww)
        for (int64_t c = 0; c < cfg_.video_channels; ++c)
          acc += vals[static_cast<size_t>(((f * g.h + hh) * g.w + ww) * cfg_.video_channels + c)];
    if (acc / denom > kDetectThreshold) frames.push_back(f);
  }
  return frames;
}

std::vector<int64_t> ToyWorld::detect_audio_spikes(const Tensor& audio) const {
  if (audio.shape() != audio_shape())
    throw ContractError("audio shape mismatch: got " + shape_str(audio.shape()));
  const auto& g = cfg_.grid;
  const auto vals = audio.values();
  std::vector<int64_t> steps;
  const double denom = static_cast<double>(g.m * cfg_.audio_channels);
  for (int64_t s = 0; s < g.t_a; ++s) {
    double acc = 0.0;
    for (int64_t mm = 0; mm < g.m; ++mm)
      for (int64_t c = 0; c < cfg_.audio_channels; ++c)
        acc += vals[static_cast<size_t>((s * g.m + mm) * cfg_.audio_channels + c)];
    if (acc / denom > kDetectThreshold) steps.push_back(s);
  }
  return steps;
}

SyncReport ToyWorld::desync(const Tensor& audio, const Tensor& video) const {
  SyncReport report;
  const auto frames = detect_video_events(video);
  const auto spikes = detect_audio_spikes(audio);
  report.video_events_detected = static_cast<int64_t>(frames.size());
  report.audio_events_detected = static_cast<int64_t>(spikes.size());
  if (frames.empty() || spikes.empty()) {
    report.desync_steps = static_cast<double>(cfg_.grid.t_a);
    report.detection_failed = true;
    return report;
  }
  double acc = 0.0;
  for (int64_t f : frames) {
    const int64_t expected = audio_step_for_frame(f);
    int64_t best = std::numeric_limits<int64_t>::max();
    for (int64_t s : spikes) best = std::min(best, std::abs(expected - s));
    acc += static_cast<double>(best);
  }
  report.desync_steps = acc / static_cast<double>(frames.size());
  return report;
}

RewardVector ToyWorld::rewards(const Tensor& gen_audio, const Tensor& gen_video,
                               const EventScript& script) const {
  const Tensor video_ref = video_template(script);
  const Tensor audio_ref = audio_template(script, 0);

  auto mse = [](const Tensor& a, const Tensor& b) {
    const auto av = a.values();
    const auto bv = b.values();
    double acc = 0.0;
    for (size_t i = 0; i < av.size(); ++i) {
      const double d = av[i] - bv[i];
      acc += d * d;
    }
    return acc / static_cast<double>(av.size());
  };
  if (gen_audio.shape() != audio_ref.shape() || gen_video.shape() != video_ref.shape())
    throw ContractError("reward inputs must match the world's latent shapes");

  const auto detected = detect_video_events(gen_video);
  const double count_error = std::abs(static_cast<double>(detected.size()) -
                                      static_cast<double>(script.event_frames.size()));

  RewardVector rv;
  rv[RewardDim::kAudio] = {-mse(gen_audio, audio_ref)};
  rv[RewardDim::kVideo] = {-mse(gen_video, video_ref), -count_error};
  rv[RewardDim::kAv] = {-desync(gen_audio, gen_video).desync_steps};
  return rv;
}

}  // namespace avflow
