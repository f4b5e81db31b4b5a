// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace avflow {

// Reward dimensions: audio quality, video quality, audio-video alignment.
enum class RewardDim : size_t { kAudio = 0, kVideo = 1, kAv = 2 };

constexpr size_t kRewardDims = 3;

// Raw per-metric scores for one candidate, grouped by dimension. Every
// candidate in a pool must carry the same metric layout.
struct RewardVector {
  std::array<std::vector<double>, kRewardDims> scores;

  std::vector<double>& operator[](RewardDim d) { return scores[static_cast<size_t>(d)]; }
  const std::vector<double>& operator[](RewardDim d) const {
    return scores[static_cast<size_t>(d)];
  }
};

}  // namespace avflow
