// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Rectified-flow training and sampling. Data lives at t=0, noise at t=1;
// trajectories are straight lines x_t = (1-t) x0 + t x1 with constant
// target velocity x1 - x0, and sampling integrates dx/dt = v from t=1
// down to t=0 with explicit Euler steps.

#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "core/tensor.hpp"
#include "model/model.hpp"

namespace avflow {

struct FlowSample {
  Tensor x0;        // data latent
  Tensor x1;        // noise latent
  Tensor xt;        // (1-t) x0 + t x1
  Tensor v_target;  // x1 - x0
  double t = 0.0;
};

// Draws x1 ~ N(0, I) from the seed and assembles the trajectory point.
FlowSample make_sample(const Tensor& x0, uint64_t noise_seed, double t);

// Standard-normal tensor from a seed (the sampler's noise source).
Tensor seeded_normal(const Shape& shape, uint64_t seed);

// Mean squared error against the sample's target velocity.
Tensor fm_loss(const Tensor& vhat, const FlowSample& sample);

// fm_loss(audio) + fm_loss(video).
Tensor joint_fm_loss(const Tensor& vhat_audio, const Tensor& vhat_video,
                     const FlowSample& sample_audio, const FlowSample& sample_video);

struct SamplerConfig {
  int64_t n_steps = 16;
};

// Joint velocity field: (vhat_audio, vhat_video) at (x_audio, x_video, t).
using VelocityFn =
    std::function<std::pair<Tensor, Tensor>(const Tensor&, const Tensor&, double)>;

// Integrates from seeded noise at t=1 to t=0; returns (audio, video).
std::pair<Tensor, Tensor> euler_sample(const VelocityFn& field, const Shape& audio_shape,
                                       const Shape& video_shape, const SamplerConfig& cfg,
                                       uint64_t seed);

// Convenience wrapper: a trained model as the velocity field.
std::pair<Tensor, Tensor> euler_sample_model(const Model& model, const ConditionInput& cond,
                                             AudioIdStrategy strategy, const GridSpec& grid,
                                             const SamplerConfig& cfg, uint64_t seed);

struct OptimizerConfig {
  double lr = 0.05;
  double momentum = 0.9;
};

// Momentum SGD over an explicit parameter subset.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, OptimizerConfig cfg);
  void step();
  void zero_grad();
  double lr() const { return cfg_.lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  OptimizerConfig cfg_;
};

struct TrainExample {
  Tensor audio_x0;
  Tensor video_x0;
  int64_t class_id = 0;
};

using ExampleSource = std::function<TrainExample(int64_t step)>;

enum class FlowStage { kAudioPretrain, kAvSft };

struct TrainFlowConfig {
  OptimizerConfig optimizer;
  int64_t steps = 2000;
  FlowStage stage = FlowStage::kAvSft;
  AudioIdStrategy strategy = AudioIdStrategy::kInterleaveOffset;
  GridSpec grid;
  uint64_t seed = 0;
};

struct TrainStepLog {
  int64_t step = 0;
  double loss = 0.0;
  double loss_audio = 0.0;
  double loss_video = 0.0;
  double lr = 0.0;
};

// Gradient descent on the flow-matching objective over `trainable`. The
// audio-pretrain stage runs audio-only forward passes and losses. Throws
// NumericError when the loss goes non-finite.
std::vector<TrainStepLog> train_flow(Model& model, const ExampleSource& source,
                                     std::vector<Tensor> trainable, const TrainFlowConfig& cfg);

}  // namespace avflow
