// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Preference optimization over joint audio-video rectified flows.
//
// Candidate pools are scored per metric within three dimensions (audio,
// video, av-alignment). Winner/loser pairs are selected by one of four
// ranking schemes; the modality-aware schemes require the winner to beat
// the loser in every dimension simultaneously. The preference loss
// contrasts policy and frozen-reference flow errors on both members of a
// pair with per-modality weights, sigmoid-squashed, plus an optional
// flow-matching regularizer on the winner.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "core/tensor.hpp"
#include "flow/flow.hpp"
#include "model/model.hpp"
#include "preference/reward.hpp"

namespace avflow {

struct Candidate {
  int64_t prompt_id = 0;
  Tensor audio;
  Tensor video;
  bool is_ground_truth = false;
  RewardVector rewards;
  int64_t class_id = 0;
  int64_t n_events = 0;
};

struct PreferencePair {
  Candidate winner;
  Candidate loser;
  std::array<double, kRewardDims> winner_sums{};  // per-dimension sums under the
  std::array<double, kRewardDims> loser_sums{};   // active strategy
};

enum class RankScheme { kAverageMicro, kAverageMacro, kModalityMicro, kModalityMacro };

const char* rank_scheme_name(RankScheme s);
RankScheme parse_rank_scheme(const std::string& name);

struct RankStrategy {
  RankScheme scheme = RankScheme::kModalityMicro;
  bool normalized = true;
  bool with_gt = true;
};

// Per-metric z-scores over the whole pool (population std, floored at
// 1e-12 so constant metrics normalize to zero). Pools of size one
// degenerate to all zeros.
std::vector<RewardVector> normalize_scores(std::span<const Candidate> pool);

// At most one pair per prompt: the admissible (winner, loser) pair with
// the largest total score gap. Admissibility under the modality schemes
// requires strict domination in every dimension; the average schemes
// collapse all metrics into one aggregate first. Prompts without an
// admissible pair are skipped.
std::vector<PreferencePair> select_pairs(std::span<const Candidate> pool,
                                         const RankStrategy& strategy);

struct DpoConfig {
  double beta_a = 1000.0;
  double beta_v = 3000.0;
  double fm_reg_weight = 1.0;
  double lr = 1e-5;
};

// Eq-style preference loss on one pair at a shared timestep and seeded
// noise. Policy passes build graph history; the reference is evaluated
// without gradients.
Tensor dpo_loss(const Model& policy, const Model& ref, const PreferencePair& pair, double t,
                uint64_t noise_seed, const DpoConfig& cfg, AudioIdStrategy strategy,
                const GridSpec& grid);

// Fraction of pairs where the policy fits the winner strictly better than
// the reference does, per modality, at fixed seeded (t, noise) per pair.
std::pair<double, double> implicit_accuracy(const Model& policy, const Model& ref,
                                            std::span<const PreferencePair> pairs,
                                            uint64_t eval_seed, AudioIdStrategy strategy,
                                            const GridSpec& grid);

struct TrainDpoConfig {
  DpoConfig dpo;
  double momentum = 0.0;
  int64_t steps = 200;
  int64_t eval_every = 25;  // implicit-accuracy cadence; 0 disables
  AudioIdStrategy strategy = AudioIdStrategy::kInterleaveOffset;
  GridSpec grid;
  uint64_t seed = 0;
};

struct DpoStepLog {
  int64_t step = 0;
  double loss = 0.0;
  std::optional<double> acc_a;
  std::optional<double> acc_v;
  std::optional<double> best_acc_a;  // cumulative best
  std::optional<double> best_acc_v;
};

// SGD on the mean pair loss over a seeded shuffle of `pairs`; the
// reference model stays frozen. Throws NumericError on non-finite loss.
std::vector<DpoStepLog> train_dpo(Model& policy, const Model& ref,
                                  std::span<const PreferencePair> pairs,
                                  std::vector<Tensor> trainable, const TrainDpoConfig& cfg);

}  // namespace avflow
