#pragma once

// Model-level oracles shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <vector>

#include "dlvit/rng.hpp"
#include "dlvit/vit.hpp"
#include "gradcheck.hpp"
#include "reference_vit.hpp"

namespace dlvit::testing {

inline std::vector<float> random_image(const ModelConfig& c, SplitMix64& rng) {
  std::vector<float> img(c.pixel_count());
  for (auto& v : img) v = static_cast<float>(rng.uniform());
  return img;
}

inline KeepMask random_mask(std::size_t n, SplitMix64& rng) {
  KeepMask m = KeepMask::all(n);
  const double p = rng.uniform(0.1, 0.9);
  for (std::size_t i = 0; i < n; ++i) m.set(i, rng.uniform() < p);
  if (m.kept_count() == 0) m.set(rng.below(n), true);
  return m;
}

inline double max_rel_diff(std::span<const float> a, std::span<const float> b) {
  double scale = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, static_cast<double>(std::fabs(a[i])));
    diff = std::max(diff, static_cast<double>(std::fabs(a[i] - b[i])));
  }
  return diff / std::max(scale, 1e-12);
}

// Masked full-length forward vs physically reduced forward for one random
// (model, mask) pair; returns the max relative logit difference.
inline double drop_vs_mask_trial(const ModelConfig& cfg, std::uint64_t seed) {
  SplitMix64 rng(seed);
  VitModel model = VitModel::init(cfg, rng());
  randomize(model, rng(), 0.1);
  const auto image = random_image(cfg, rng);
  const TokenMatrix tokens = model.embed(image);
  const KeepMask mask = random_mask(cfg.num_patches(), rng);
  const Tensor masked = model.forward(tokens, &mask);
  const Tensor dropped = model.forward_reduced(std::span<const TokenMatrix>(&tokens, 1), std::span<const KeepMask>(&mask, 1));
  return max_rel_diff(masked.data(), dropped.data());
}

// Depth-2, d=8, N=4 model with random weights; cross-entropy gradient with
// respect to every weight tensor against central differences.
inline GradCheckResult model_gradient_trial(std::uint64_t seed, std::size_t per_leaf = 0) {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 2;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.dim = 8;
  cfg.mlp_ratio = 2;
  cfg.num_classes = 3;
  SplitMix64 rng(seed);
  VitModel model = VitModel::init(cfg, rng());
  randomize(model, rng(), 0.3);
  const auto image = random_image(cfg, rng);
  const std::vector<int> label = {static_cast<int>(rng.below(cfg.num_classes))};
  KeepMask mask = random_mask(cfg.num_patches(), rng);
  auto loss = [&](Tape* t) { return cross_entropy(model.forward(model.embed(image, "", t), &mask, t), label, t); };
  return grad_check(model.parameters(), loss, 1e-3f, per_leaf, seed);
}

}  // namespace dlvit::testing
