// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "flow/flow.hpp"

#include <cmath>
#include <sstream>

#include "core/rng.hpp"

namespace avflow {

Tensor seeded_normal(const Shape& shape, uint64_t seed) {
  Rng rng(seed);
  return Tensor::from_values(shape, rng.normal_vec(static_cast<size_t>(shape_numel(shape))));
}

FlowSample make_sample(const Tensor& x0, uint64_t noise_seed, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ContractError("flow time must lie in [0, 1]");
  FlowSample s;
  s.t = t;
  s.x0 = x0;
  s.x1 = seeded_normal(x0.shape(), noise_seed);
  // Exact endpoints: at t=0 use x0 verbatim, at t=1 use x1 verbatim.
  if (t == 0.0) {
    s.xt = s.x0.detach();
  } else if (t == 1.0) {
    s.xt = s.x1.detach();
  } else {
    s.xt = add(mul_scalar(s.x0, 1.0 - t), mul_scalar(s.x1, t)).detach();
  }
  s.v_target = sub(s.x1, s.x0).detach();
  return s;
}

Tensor fm_loss(const Tensor& vhat, const FlowSample& sample) {
  if (vhat.shape() != sample.v_target.shape())
    throw ContractError("fm_loss: prediction shape " + shape_str(vhat.shape()) +
                        " does not match target " + shape_str(sample.v_target.shape()));
  return mean(square(sub(vhat, sample.v_target)));
}

Tensor joint_fm_loss(const Tensor& vhat_audio, const Tensor& vhat_video,
                     const FlowSample& sample_audio, const FlowSample& sample_video) {
  return add(fm_loss(vhat_audio, sample_audio), fm_loss(vhat_video, sample_video));
}

std::pair<Tensor, Tensor> euler_sample(const VelocityFn& field, const Shape& audio_shape,
                                       const Shape& video_shape, const SamplerConfig& cfg,
                                       uint64_t seed) {
  if (cfg.n_steps < 1) throw ContractError("sampler needs at least one step");
  NoGradGuard no_grad;
  Tensor xa = seeded_normal(audio_shape, mix_seed(seed, 1));
  Tensor xv = seeded_normal(video_shape, mix_seed(seed, 2));
  const int64_t n = cfg.n_steps;
  for (int64_t k = 0; k < n; ++k) {
    const double t_cur = static_cast<double>(n - k) / static_cast<double>(n);
    const double t_next = static_cast<double>(n - k - 1) / static_cast<double>(n);
    const double dt = t_cur - t_next;
    auto [va, vv] = field(xa, xv, t_cur);
    if (va.shape() != audio_shape || vv.shape() != video_shape)
      throw ContractError("velocity field returned mismatched shapes");
    xa = sub(xa, mul_scalar(va, dt));
    xv = sub(xv, mul_scalar(vv, dt));
  }
  return {xa, xv};
}

std::pair<Tensor, Tensor> euler_sample_model(const Model& model, const ConditionInput& cond,
                                             AudioIdStrategy strategy, const GridSpec& grid,
                                             const SamplerConfig& cfg, uint64_t seed) {
  const Shape audio_shape{grid.t_a, grid.m, model.config().audio_channels};
  const Shape video_shape{grid.t_v, grid.h, grid.w, model.config().video_channels};
  VelocityFn field = [&](const Tensor& xa, const Tensor& xv, double t) {
    ConditionInput c = cond;
    c.t = t;
    return model.forward(xa, xv, c, strategy, grid);
  };
  return euler_sample(field, audio_shape, video_shape, cfg, seed);
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, OptimizerConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
}

void SgdOptimizer::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    auto vals = params_[i].mutable_values();
    const auto grad = params_[i].grad();
    auto& vel = velocity_[i];
    for (size_t j = 0; j < vals.size(); ++j) {
      vel[j] = cfg_.momentum * vel[j] + grad[j];
      vals[j] -= cfg_.lr * vel[j];
    }
  }
}

void SgdOptimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::vector<TrainStepLog> train_flow(Model& model, const ExampleSource& source,
                                     std::vector<Tensor> trainable, const TrainFlowConfig& cfg) {
  SgdOptimizer opt(std::move(trainable), cfg.optimizer);
  Rng rng(mix_seed(cfg.seed, 0x74726eULL));
  std::vector<TrainStepLog> log;
  log.reserve(static_cast<size_t>(cfg.steps));
  model.zero_grads();

  for (int64_t step = 0; step < cfg.steps; ++step) {
    const TrainExample ex = source(step);
    const double t = rng.uniform();
    const uint64_t noise_a = mix_seed(cfg.seed, 2 * static_cast<uint64_t>(step) + 1);
    const uint64_t noise_v = mix_seed(cfg.seed, 2 * static_cast<uint64_t>(step) + 2);
    const ConditionInput cond{ex.class_id, t};

    Tensor loss;
    double loss_audio = 0.0, loss_video = 0.0;
    if (cfg.stage == FlowStage::kAudioPretrain) {
      FlowSample sa = make_sample(ex.audio_x0, noise_a, t);
      Tensor vhat_a = model.forward_audio(sa.xt, cond, cfg.strategy, cfg.grid);
      loss = fm_loss(vhat_a, sa);
      loss_audio = loss.item();
    } else {
      FlowSample sa = make_sample(ex.audio_x0, noise_a, t);
      FlowSample sv = make_sample(ex.video_x0, noise_v, t);
      auto [vhat_a, vhat_v] = model.forward(sa.xt, sv.xt, cond, cfg.strategy, cfg.grid);
      Tensor la = fm_loss(vhat_a, sa);
      Tensor lv = fm_loss(vhat_v, sv);
      loss_audio = la.item();
      loss_video = lv.item();
      loss = add(la, lv);
    }

    const double loss_val = loss.item();
    if (!std::isfinite(loss_val)) {
      std::ostringstream os;
      os << "training diverged: non-finite loss at step " << step;
      throw NumericError(os.str());
    }
    backward(loss);
    opt.step();
    model.zero_grads();
    log.push_back({step, loss_val, loss_audio, loss_video, cfg.optimizer.lr});
  }
  return log;
}

}  // namespace avflow
