// Copyright (c) 2026 The avflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "rope/rope.hpp"

#include <cmath>
#include <unordered_set>

namespace avflow {

void GridSpec::validate() const {
  if (t_v < 1 || h < 1 || w < 1 || t_a < 1 || m < 1)
    throw ContractError("grid extents must all be >= 1");
}

const char* strategy_name(AudioIdStrategy s) {
  switch (s) {
    case AudioIdStrategy::kVanilla: return "vanilla";
    case AudioIdStrategy::kInterpolate: return "interpolate";
    case AudioIdStrategy::kInterleave: return "interleave";
    case AudioIdStrategy::kInterleaveOffset: return "interleave-offset";
  }
  throw ContractError("unknown strategy");
}

AudioIdStrategy parse_strategy(const std::string& name) {
  if (name == "vanilla") return AudioIdStrategy::kVanilla;
  if (name == "interpolate") return AudioIdStrategy::kInterpolate;
  if (name == "interleave") return AudioIdStrategy::kInterleave;
  if (name == "interleave-offset") return AudioIdStrategy::kInterleaveOffset;
  throw ContractError("unknown audio ID strategy '" + name + "'");
}

bool strategy_fractional(AudioIdStrategy s) { return s == AudioIdStrategy::kInterpolate; }

RopeConfig RopeConfig::auto_split(int64_t head_dim, double base) {
  RopeConfig cfg;
  cfg.head_dim = head_dim;
  cfg.base = base;
  const int64_t quarter = (head_dim / 4) & ~int64_t{1};
  cfg.d_h = quarter;
  cfg.d_w = quarter;
  cfg.d_t = head_dim - 2 * quarter;
  cfg.validate();
  return cfg;
}

void RopeConfig::validate() const {
  if (head_dim < 2 || head_dim % 2 != 0)
    throw ContractError("rope head_dim must be even and >= 2");
  if (d_t + d_h + d_w != head_dim) throw ContractError("rope sub-bands must sum to head_dim");
  for (int64_t d : {d_t, d_h, d_w})
    if (d < 0 || d % 2 != 0) throw ContractError("rope sub-bands must be even and non-negative");
  if (d_t < 2) throw ContractError("temporal rope band must be at least 2");
  if (!(base > 1.0)) throw ContractError("rope base must exceed 1");
}

int64_t round_half_away(int64_t num, int64_t den) {
  if (den <= 0) throw ContractError("round_half_away requires a positive denominator");
  if (num >= 0) return (2 * num + den) / (2 * den);
  return -((-2 * num + den) / (2 * den));
}

std::vector<PositionTriple> video_position_ids(const GridSpec& grid) {
  grid.validate();
  std::vector<PositionTriple> ids;
  ids.reserve(static_cast<size_t>(grid.video_tokens()));
  for (int64_t t = 0; t < grid.t_v; ++t)
    for (int64_t h = 0; h < grid.h; ++h)
      for (int64_t w = 0; w < grid.w; ++w)
        ids.push_back({static_cast<double>(t), static_cast<double>(h), static_cast<double>(w)});
  return ids;
}

std::vector<PositionTriple> audio_position_ids(AudioIdStrategy strategy, const GridSpec& grid) {
  grid.validate();
  std::vector<PositionTriple> ids;
  ids.reserve(static_cast<size_t>(grid.audio_tokens()));
  for (int64_t t = 0; t < grid.t_a; ++t) {
    for (int64_t m = 0; m < grid.m; ++m) {
      PositionTriple p;
      switch (strategy) {
        case AudioIdStrategy::kVanilla:
          p = {static_cast<double>(t), static_cast<double>(t), static_cast<double>(m)};
          break;
        case AudioIdStrategy::kInterpolate: {
          const double scaled =
              static_cast<double>(t * grid.t_v) / static_cast<double>(grid.t_a);
          p = {scaled, scaled, static_cast<double>(m)};
          break;
        }
        case AudioIdStrategy::kInterleave: {
          const auto aligned = round_half_away(t * grid.t_v, grid.t_a);
          p = {static_cast<double>(aligned), static_cast<double>(t), static_cast<double>(m)};
          break;
        }
        case AudioIdStrategy::kInterleaveOffset: {
          const auto aligned = round_half_away(t * grid.t_v, grid.t_a);
          p = {static_cast<double>(aligned), static_cast<double>(t + grid.h),
               static_cast<double>(m + grid.w)};
          break;
        }
      }
      ids.push_back(p);
    }
  }
  return ids;
}

Tensor apply_rotary(const Tensor& x, std::span<const PositionTriple> ids, const RopeConfig& cfg) {
  cfg.validate();
  if (x.ndim() != 2 || x.dim(1) != cfg.head_dim)
    throw ContractError("apply_rotary: expected [n x head_dim] input, got " +
                        shape_str(x.shape()));
  const int64_t n = x.dim(0);
  if (static_cast<int64_t>(ids.size()) != n)
    throw ContractError("apply_rotary: id count does not match row count");

  const int64_t d = cfg.head_dim;
  // Per-row cos/sin for each rotation pair, laid out pair-major.
  const int64_t n_pairs = d / 2;
  std::vector<double> cos_tab(static_cast<size_t>(n * n_pairs));
  std::vector<double> sin_tab(static_cast<size_t>(n * n_pairs));
  struct Band {
    int64_t width;
    double PositionTriple::*component;
  };
  const Band bands[3] = {{cfg.d_t, &PositionTriple::t},
                         {cfg.d_h, &PositionTriple::h},
                         {cfg.d_w, &PositionTriple::w}};
  for (int64_t i = 0; i < n; ++i) {
    int64_t pair = 0;
    for (const Band& band : bands) {
      const double pos = ids[static_cast<size_t>(i)].*band.component;
      for (int64_t j = 0; j < band.width / 2; ++j, ++pair) {
        const double theta =
            std::pow(cfg.base, -2.0 * static_cast<double>(j) / static_cast<double>(band.width));
        const double angle = theta * pos;
        cos_tab[static_cast<size_t>(i * n_pairs + pair)] = std::cos(angle);
        sin_tab[static_cast<size_t>(i * n_pairs + pair)] = std::sin(angle);
      }
    }
  }

  std::vector<double> out(static_cast<size_t>(n * d));
  const auto xv = x.values();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t p = 0; p < n_pairs; ++p) {
      const double c = cos_tab[static_cast<size_t>(i * n_pairs + p)];
      const double s = sin_tab[static_cast<size_t>(i * n_pairs + p)];
      const double a = xv[static_cast<size_t>(i * d + 2 * p)];
      const double b = xv[static_cast<size_t>(i * d + 2 * p + 1)];
      out[static_cast<size_t>(i * d + 2 * p)] = a * c - b * s;
      out[static_cast<size_t>(i * d + 2 * p + 1)] = a * s + b * c;
    }

  return make_op({n, d}, std::move(out), {x},
                 [n, d, n_pairs, cos_tab = std::move(cos_tab),
                  sin_tab = std::move(sin_tab)](TensorNode& node) {
                   auto& xn = *node.inputs[0];
                   if (!xn.requires_grad) return;
                   xn.ensure_grad();
                   // Inverse rotation of the upstream gradient.
                   for (int64_t i = 0; i < n; ++i)
                     for (int64_t p = 0; p < n_pairs; ++p) {
                       const double c = cos_tab[static_cast<size_t>(i * n_pairs + p)];
                       const double s = sin_tab[static_cast<size_t>(i * n_pairs + p)];
                       const double ga = node.grad[static_cast<size_t>(i * d + 2 * p)];
                       const double gb = node.grad[static_cast<size_t>(i * d + 2 * p + 1)];
                       xn.grad[static_cast<size_t>(i * d + 2 * p)] += ga * c + gb * s;
                       xn.grad[static_cast<size_t>(i * d + 2 * p + 1)] += -ga * s + gb * c;
                     }
                 });
}

int64_t count_overlaps(std::span<const PositionTriple> video_ids,
                       std::span<const PositionTriple> audio_ids) {
  struct TripleHash {
    size_t operator()(const PositionTriple& p) const {
      auto h = std::hash<double>{};
      size_t seed = h(p.t);
      seed ^= h(p.h) + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2);
      seed ^= h(p.w) + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2);
      return seed;
    }
  };
  std::unordered_set<PositionTriple, TripleHash> video_set(video_ids.begin(), video_ids.end());
  int64_t count = 0;
  for (const auto& a : audio_ids) count += video_set.count(a) ? 1 : 0;
  return count;
}

}  // namespace avflow
