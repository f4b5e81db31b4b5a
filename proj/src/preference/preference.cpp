// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "preference/preference.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "core/rng.hpp"

namespace avflow {

namespace {

struct MetricRef {
  RewardDim dim;
  size_t index;
};

// Flattened metric layout of a pool; also validates consistency.
std::vector<MetricRef> metric_layout(std::span<const Candidate> pool) {
  if (pool.empty()) throw ContractError("candidate pool is empty");
  std::vector<MetricRef> layout;
  for (size_t d = 0; d < kRewardDims; ++d) {
    const size_t count = pool[0].rewards.scores[d].size();
    if (count == 0) throw ContractError("every reward dimension needs at least one metric");
    for (const auto& c : pool)
      if (c.rewards.scores[d].size() != count)
        throw ContractError("candidates disagree on metric layout");
    for (size_t j = 0; j < count; ++j) layout.push_back({static_cast<RewardDim>(d), j});
  }
  return layout;
}

double metric_value(const RewardVector& rv, const MetricRef& m) {
  return rv.scores[static_cast<size_t>(m.dim)][m.index];
}

// Average ranks (1 = best) per metric across the pool; ties share the mean
// rank, which keeps ranking invariant under positive-affine rescaling.
std::vector<std::vector<double>> metric_ranks(std::span<const Candidate> pool,
                                              const std::vector<MetricRef>& layout) {
  const size_t n = pool.size();
  std::vector<std::vector<double>> ranks(layout.size(), std::vector<double>(n, 0.0));
  std::vector<size_t> order(n);
  for (size_t mi = 0; mi < layout.size(); ++mi) {
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return metric_value(pool[a].rewards, layout[mi]) >
             metric_value(pool[b].rewards, layout[mi]);
    });
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      const double v = metric_value(pool[order[i]].rewards, layout[mi]);
      while (j < n && metric_value(pool[order[j]].rewards, layout[mi]) == v) ++j;
      const double shared = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
      for (size_t k = i; k < j; ++k) ranks[mi][order[k]] = shared;
      i = j;
    }
  }
  return ranks;
}

}  // namespace

const char* rank_scheme_name(RankScheme s) {
  switch (s) {
    case RankScheme::kAverageMicro: return "average-micro";
    case RankScheme::kAverageMacro: return "average-macro";
    case RankScheme::kModalityMicro: return "modality-micro";
    case RankScheme::kModalityMacro: return "modality-macro";
  }
  throw ContractError("unknown rank scheme");
}

RankScheme parse_rank_scheme(const std::string& name) {
  if (name == "average-micro") return RankScheme::kAverageMicro;
  if (name == "average-macro") return RankScheme::kAverageMacro;
  if (name == "modality-micro") return RankScheme::kModalityMicro;
  if (name == "modality-macro") return RankScheme::kModalityMacro;
  throw ContractError("unknown rank scheme '" + name + "'");
}

std::vector<RewardVector> normalize_scores(std::span<const Candidate> pool) {
  const auto layout = metric_layout(pool);
  std::vector<RewardVector> out(pool.size());
  for (size_t i = 0; i < pool.size(); ++i) out[i] = pool[i].rewards;
  for (const auto& m : layout) {
    double mean = 0.0;
    for (const auto& c : pool) mean += metric_value(c.rewards, m);
    mean /= static_cast<double>(pool.size());
    double var = 0.0;
    for (const auto& c : pool) {
      const double d = metric_value(c.rewards, m) - mean;
      var += d * d;
    }
    var /= static_cast<double>(pool.size());
    const double std_floor = std::max(std::sqrt(var), 1e-12);
    for (size_t i = 0; i < pool.size(); ++i) {
      auto& v = out[i].scores[static_cast<size_t>(m.dim)][m.index];
      v = (v - mean) / std_floor;
    }
  }
  return out;
}

std::vector<PreferencePair> select_pairs(std::span<const Candidate> pool,
                                         const RankStrategy& strategy) {
  // Ground-truth filtering happens before scoring so that normalization and
  // ranks only see candidates in play.
  std::vector<Candidate> filtered;
  for (const auto& c : pool)
    if (strategy.with_gt || !c.is_ground_truth) filtered.push_back(c);
  if (filtered.empty()) return {};

  const auto layout = metric_layout(filtered);

  // Effective per-metric scores: raw values, z-scores, or negated ranks.
  std::vector<std::vector<double>> eff(filtered.size(),
                                       std::vector<double>(layout.size(), 0.0));
  const bool macro =
      strategy.scheme == RankScheme::kAverageMacro || strategy.scheme == RankScheme::kModalityMacro;
  if (macro) {
    const auto ranks = metric_ranks(filtered, layout);
    for (size_t i = 0; i < filtered.size(); ++i)
      for (size_t mi = 0; mi < layout.size(); ++mi) eff[i][mi] = -ranks[mi][i];
  } else if (strategy.normalized) {
    const auto normalized = normalize_scores(filtered);
    for (size_t i = 0; i < filtered.size(); ++i)
      for (size_t mi = 0; mi < layout.size(); ++mi)
        eff[i][mi] = metric_value(normalized[i], layout[mi]);
  } else {
    for (size_t i = 0; i < filtered.size(); ++i)
      for (size_t mi = 0; mi < layout.size(); ++mi)
        eff[i][mi] = metric_value(filtered[i].rewards, layout[mi]);
  }

  auto dim_sums = [&](size_t i) {
    std::array<double, kRewardDims> sums{};
    for (size_t mi = 0; mi < layout.size(); ++mi)
      sums[static_cast<size_t>(layout[mi].dim)] += eff[i][mi];
    return sums;
  };

  const bool modality_aware = strategy.scheme == RankScheme::kModalityMicro ||
                              strategy.scheme == RankScheme::kModalityMacro;

  std::map<int64_t, std::vector<size_t>> by_prompt;
  for (size_t i = 0; i < filtered.size(); ++i) by_prompt[filtered[i].prompt_id].push_back(i);

  std::vector<PreferencePair> pairs;
  for (const auto& [prompt_id, members] : by_prompt) {
    double best_gap = 0.0;
    bool found = false;
    size_t best_w = 0, best_l = 0;
    for (size_t w : members) {
      for (size_t l : members) {
        if (w == l) continue;
        const auto sw = dim_sums(w);
        const auto sl = dim_sums(l);
        bool admissible;
        double gap;
        if (modality_aware) {
          admissible = true;
          for (size_t d = 0; d < kRewardDims; ++d) admissible &= sw[d] > sl[d];
          gap = 0.0;
          for (size_t d = 0; d < kRewardDims; ++d) gap += sw[d] - sl[d];
        } else {
          double agg_w = 0.0, agg_l = 0.0;
          for (size_t mi = 0; mi < layout.size(); ++mi) {
            agg_w += eff[w][mi];
            agg_l += eff[l][mi];
          }
          agg_w /= static_cast<double>(layout.size());
          agg_l /= static_cast<double>(layout.size());
          admissible = agg_w > agg_l;
          gap = agg_w - agg_l;
        }
        if (admissible && (!found || gap > best_gap)) {
          found = true;
          best_gap = gap;
          best_w = w;
          best_l = l;
        }
      }
    }
    if (!found) continue;  // conflicting dimensions or ties: prompt skipped
    PreferencePair pair;
    pair.winner = filtered[best_w];
    pair.loser = filtered[best_l];
    pair.winner_sums = dim_sums(best_w);
    pair.loser_sums = dim_sums(best_l);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

namespace {

struct PairSamples {
  FlowSample winner_audio, winner_video, loser_audio, loser_video;
};

PairSamples build_samples(const PreferencePair& pair, double t, uint64_t noise_seed) {
  if (pair.winner.audio.shape() != pair.loser.audio.shape() ||
      pair.winner.video.shape() != pair.loser.video.shape())
    throw ContractError("pair members have mismatched latent shapes");
  PairSamples s;
  s.winner_audio = make_sample(pair.winner.audio, mix_seed(noise_seed, 1), t);
  s.winner_video = make_sample(pair.winner.video, mix_seed(noise_seed, 2), t);
  s.loser_audio = make_sample(pair.loser.audio, mix_seed(noise_seed, 3), t);
  s.loser_video = make_sample(pair.loser.video, mix_seed(noise_seed, 4), t);
  return s;
}

struct Diffs {
  double audio = 0.0;
  double video = 0.0;
};

// Winner-minus-loser flow errors for a frozen model (no graph).
Diffs reference_diffs(const Model& model, const PairSamples& s, const ConditionInput& cond,
                      AudioIdStrategy strategy, const GridSpec& grid) {
  NoGradGuard no_grad;
  auto [wa, wv] = model.forward(s.winner_audio.xt, s.winner_video.xt, cond, strategy, grid);
  auto [la, lv] = model.forward(s.loser_audio.xt, s.loser_video.xt, cond, strategy, grid);
  Diffs d;
  d.audio = fm_loss(wa, s.winner_audio).item() - fm_loss(la, s.loser_audio).item();
  d.video = fm_loss(wv, s.winner_video).item() - fm_loss(lv, s.loser_video).item();
  return d;
}

}  // namespace

Tensor dpo_loss(const Model& policy, const Model& ref, const PreferencePair& pair, double t,
                uint64_t noise_seed, const DpoConfig& cfg, AudioIdStrategy strategy,
                const GridSpec& grid) {
  const PairSamples s = build_samples(pair, t, noise_seed);
  const ConditionInput cond{pair.winner.class_id, t};

  auto [pol_wa, pol_wv] = policy.forward(s.winner_audio.xt, s.winner_video.xt, cond, strategy, grid);
  auto [pol_la, pol_lv] = policy.forward(s.loser_audio.xt, s.loser_video.xt, cond, strategy, grid);
  Tensor win_fm_audio = fm_loss(pol_wa, s.winner_audio);
  Tensor win_fm_video = fm_loss(pol_wv, s.winner_video);
  Tensor diff_pol_a = sub(win_fm_audio, fm_loss(pol_la, s.loser_audio));
  Tensor diff_pol_v = sub(win_fm_video, fm_loss(pol_lv, s.loser_video));

  const Diffs ref_d = reference_diffs(ref, s, cond, strategy, grid);

  Tensor z = add(mul_scalar(sub(diff_pol_v, Tensor::scalar(ref_d.video)), -cfg.beta_v),
                 mul_scalar(sub(diff_pol_a, Tensor::scalar(ref_d.audio)), -cfg.beta_a));
  Tensor loss = softplus(mul_scalar(z, -1.0));  // -log sigmoid(z)
  if (cfg.fm_reg_weight != 0.0)
    loss = add(loss, mul_scalar(add(win_fm_audio, win_fm_video), cfg.fm_reg_weight));
  return loss;
}

std::pair<double, double> implicit_accuracy(const Model& policy, const Model& ref,
                                            std::span<const PreferencePair> pairs,
                                            uint64_t eval_seed, AudioIdStrategy strategy,
                                            const GridSpec& grid) {
  if (pairs.empty()) throw ContractError("implicit_accuracy needs at least one pair");
  int64_t hits_a = 0, hits_v = 0;
  for (size_t i = 0; i < pairs.size(); ++i) {
    Rng rng(mix_seed(eval_seed, 2 * i));
    const double t = rng.uniform();
    const uint64_t noise_seed = mix_seed(eval_seed, 2 * i + 1);
    const PairSamples s = build_samples(pairs[i], t, noise_seed);
    const ConditionInput cond{pairs[i].winner.class_id, t};
    const Diffs pol = reference_diffs(policy, s, cond, strategy, grid);
    const Diffs rd = reference_diffs(ref, s, cond, strategy, grid);
    if (pol.audio < rd.audio) ++hits_a;
    if (pol.video < rd.video) ++hits_v;
  }
  const double n = static_cast<double>(pairs.size());
  return {static_cast<double>(hits_a) / n, static_cast<double>(hits_v) / n};
}

std::vector<DpoStepLog> train_dpo(Model& policy, const Model& ref,
                                  std::span<const PreferencePair> pairs,
                                  std::vector<Tensor> trainable, const TrainDpoConfig& cfg) {
  if (pairs.empty()) throw ContractError("train_dpo needs at least one pair");
  SgdOptimizer opt(std::move(trainable), OptimizerConfig{cfg.dpo.lr, cfg.momentum});
  Rng shuffle_rng(mix_seed(cfg.seed, 0x73687566ULL));
  Rng t_rng(mix_seed(cfg.seed, 0x74ULL));
  const uint64_t acc_seed = mix_seed(cfg.seed, 0x616363ULL);

  std::vector<size_t> order(pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<DpoStepLog> log;
  log.reserve(static_cast<size_t>(cfg.steps));
  double best_a = 0.0, best_v = 0.0;
  bool have_best = false;
  policy.zero_grads();

  for (int64_t step = 0; step < cfg.steps; ++step) {
    const size_t cursor = static_cast<size_t>(step) % pairs.size();
    if (cursor == 0) shuffle_rng.shuffle(order);
    const PreferencePair& pair = pairs[order[cursor]];

    const double t = t_rng.uniform();
    const uint64_t noise_seed = mix_seed(cfg.seed, 0x1000 + static_cast<uint64_t>(step));
    Tensor loss = dpo_loss(policy, ref, pair, t, noise_seed, cfg.dpo, cfg.strategy, cfg.grid);
    const double loss_val = loss.item();
    if (!std::isfinite(loss_val)) {
      std::ostringstream os;
      os << "preference training diverged: non-finite loss at step " << step;
      throw NumericError(os.str());
    }
    backward(loss);
    opt.step();
    policy.zero_grads();

    DpoStepLog entry;
    entry.step = step;
    entry.loss = loss_val;
    const bool eval_now =
        cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps);
    if (eval_now) {
      auto [acc_a, acc_v] = implicit_accuracy(policy, ref, pairs, acc_seed, cfg.strategy, cfg.grid);
      if (!have_best) {
        best_a = acc_a;
        best_v = acc_v;
        have_best = true;
      } else {
        best_a = std::max(best_a, acc_a);
        best_v = std::max(best_v, acc_v);
      }
      entry.acc_a = acc_a;
      entry.acc_v = acc_v;
      entry.best_acc_a = best_a;
      entry.best_acc_v = best_v;
    }
    log.push_back(entry);
  }
  return log;
}

}  // namespace avflow
