// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0
//
// 3D rotary position encoding for joint audio-video token sequences.
//
// Video tokens live on a (t, h, w) grid and always take their grid
// coordinates as position IDs. Audio tokens of shape T_a x M receive 3D
// IDs under one of four strategies; interleave-offset places every audio
// token at a triple no video token can occupy while keeping its temporal
// component aligned with the co-occurring video frame.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace avflow {

struct GridSpec {
  int64_t t_v = 8;  // video frames
  int64_t h = 4;    // height tokens
  int64_t w = 4;    // width tokens
  int64_t t_a = 32; // audio temporal steps
  int64_t m = 8;    // frequency bins

  int64_t video_tokens() const { return t_v * h * w; }
  int64_t audio_tokens() const { return t_a * m; }
  void validate() const;
  bool operator==(const GridSpec&) const = default;
};

struct PositionTriple {
  double t = 0.0;
  double h = 0.0;
  double w = 0.0;
  bool operator==(const PositionTriple&) const = default;
};

enum class AudioIdStrategy { kVanilla, kInterpolate, kInterleave, kInterleaveOffset };

const char* strategy_name(AudioIdStrategy s);
AudioIdStrategy parse_strategy(const std::string& name);

// True when the strategy can emit non-integer position components.
bool strategy_fractional(AudioIdStrategy s);

struct RopeConfig {
  int64_t head_dim = 8;
  int64_t d_t = 4;  // temporal sub-band width
  int64_t d_h = 2;
  int64_t d_w = 2;
  double base = 10000.0;

  // Splits head_dim roughly (1/2, 1/4, 1/4), each rounded down to an even
  // width with the remainder going to the temporal band. Bands may be zero
  // wide for very small head dims; a zero band ignores that axis.
  static RopeConfig auto_split(int64_t head_dim, double base = 10000.0);
  void validate() const;
};

// Round half away from zero of num/den, exactly, for den > 0.
int64_t round_half_away(int64_t num, int64_t den);

// Lexicographic (t, h, w) enumeration over the video grid.
std::vector<PositionTriple> video_position_ids(const GridSpec& grid);

// Audio IDs in (t, m) order, t-major. Per strategy, token (t, m) maps to:
//   vanilla             (t, t, m)
//   interpolate         (t*T_v/T_a, t*T_v/T_a, m)
//   interleave          (round(t*T_v/T_a), t, m)
//   interleave-offset   (round(t*T_v/T_a), t+H, m+W)
std::vector<PositionTriple> audio_position_ids(AudioIdStrategy strategy, const GridSpec& grid);

// Rotates consecutive value pairs within each axis sub-band by angle
// theta_j * p, theta_j = base^(-2j/d_axis). Differentiable.
Tensor apply_rotary(const Tensor& x, std::span<const PositionTriple> ids, const RopeConfig& cfg);

// Number of audio triples exactly equal to some video triple.
int64_t count_overlaps(std::span<const PositionTriple> video_ids,
                       std::span<const PositionTriple> audio_ids);

}  // namespace avflow
