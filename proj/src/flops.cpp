#include "dlvit/flops.hpp"

#include <algorithm>
#include <cmath>

#include "dlvit/error.hpp"

namespace dlvit {

namespace {

constexpr std::uint64_t kFilterHidden2 = 100;

BlockMacs block_macs(const ModelConfig& c, std::uint64_t s) {
  const std::uint64_t d = c.dim;
  BlockMacs b;
  b.qkv = 3 * s * d * d;
  b.scores = s * s * d;
  b.weighted_values = s * s * d;
  b.out_proj = s * d * d;
  b.mlp = 2 * s * d * (c.mlp_ratio * d);
  return b;
}

std::uint64_t filter_macs(const ModelConfig& c, FilterShape f) {
  if (!f.present) return 0;
  const std::uint64_t d = c.dim, in = f.use_global ? 2 * d : d, h1 = 2 * d;
  return c.num_patches() * (in * h1 + h1 * kFilterHidden2 + kFilterHidden2);
}

std::uint64_t fixed_macs(const ModelConfig& c, FilterShape f) {
  const std::uint64_t embed = static_cast<std::uint64_t>(c.num_patches()) * c.patch_dim() * c.dim;
  return embed + static_cast<std::uint64_t>(c.dim) * c.num_classes + filter_macs(c, f);
}

}  // namespace

double macs_at(const ModelConfig& c, double s, FilterShape f) {
  const double d = static_cast<double>(c.dim);
  const double per_block = 4.0 * s * d * d + 2.0 * s * s * d + 2.0 * s * d * (static_cast<double>(c.mlp_ratio) * d);
  return per_block * static_cast<double>(c.depth) + static_cast<double>(fixed_macs(c, f));
}

FlopsReport count_flops(const ModelConfig& config, std::size_t kept_tokens, FilterShape filter) {
  config.validate();
  const std::size_t full = config.num_patches() + 1;
  if (kept_tokens < 1 || kept_tokens > full) {
    throw ContractError("count_flops: sequence length " + std::to_string(kept_tokens) + " outside [1, " +
                        std::to_string(full) + "]");
  }
  FlopsReport r;
  r.config = config;
  r.seq_len = kept_tokens;
  r.per_block = block_macs(config, kept_tokens);
  r.embed = static_cast<std::uint64_t>(config.num_patches()) * config.patch_dim() * config.dim;
  r.head = static_cast<std::uint64_t>(config.dim) * config.num_classes;
  r.filter = filter_macs(config, filter);
  r.total = r.blocks_total() + r.embed + r.head + r.filter;
  r.full_total = block_macs(config, full).total() * config.depth + r.embed + r.head + r.filter;
  r.params = params_count(config, filter);
  return r;
}

std::uint64_t params_count(const ModelConfig& c) {
  const std::uint64_t d = c.dim, h = c.hidden_dim(), n = c.num_patches();
  const std::uint64_t embed = c.patch_dim() * d + d + d + (n + 1) * d;
  const std::uint64_t block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
  const std::uint64_t tail = 2 * d + d * c.num_classes + c.num_classes;
  return embed + block * c.depth + tail;
}

std::uint64_t filter_params_count(std::size_t dim, bool use_global) {
  const std::uint64_t in = use_global ? 2 * dim : dim, h1 = 2 * dim;
  return (in * h1 + h1) + (h1 * kFilterHidden2 + kFilterHidden2) + (kFilterHidden2 + 1);
}

std::uint64_t params_count(const ModelConfig& config, FilterShape filter) {
  return params_count(config) + (filter.present ? filter_params_count(config.dim, filter.use_global) : 0);
}

std::size_t seq_len_for_ratio(const ModelConfig& config, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ContractError("keep ratio must lie in (0, 1]");
  const double n = static_cast<double>(config.num_patches());
  // guard against ratio * N landing a hair above an integer
  const auto kept = static_cast<std::size_t>(std::ceil(ratio * n - 1e-9));
  return std::clamp<std::size_t>(kept, 1, config.num_patches()) + 1;
}

std::vector<SweepRow> sweep_keep_ratio(const ModelConfig& config, const std::vector<double>& ratios,
                                       FilterShape filter) {
  std::vector<SweepRow> rows;
  rows.reserve(ratios.size());
  for (double r : ratios) {
    SweepRow row;
    row.ratio = r;
    row.seq_len = seq_len_for_ratio(config, r);
    const FlopsReport rep = count_flops(config, row.seq_len, filter);
    row.macs = rep.total;
    row.speedup = static_cast<double>(rep.full_total) / static_cast<double>(rep.total);
    rows.push_back(row);
  }
  return rows;
}

namespace {

// Smallest continuous ratio r in (0, 1] with f(r) >= target, f increasing.
template <class F>
double bisect_ratio(F f, double target) {
  double lo = 0.0, hi = 1.0;
  if (target > f(hi) * (1 + 1e-12) || target < f(lo) * (1 - 1e-12)) {
    throw ConfigError("target MACs outside the attainable range");
  }
  for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < target ? lo : hi) = mid;
  }
  return hi;
}

}  // namespace

double ratio_for_macs(const ModelConfig& config, double target, FilterShape filter) {
  const double n = static_cast<double>(config.num_patches());
  return bisect_ratio([&](double r) { return macs_at(config, r * n + 1.0, filter); }, target);
}

std::uint64_t gradual_macs(const ModelConfig& config, const std::vector<double>& gradual) {
  if (gradual.size() != config.depth) {
    throw ContractError("gradual schedule has " + std::to_string(gradual.size()) + " entries for depth " +
                        std::to_string(config.depth));
  }
  std::uint64_t total = fixed_macs(config, {});
  for (double r : gradual) total += block_macs(config, seq_len_for_ratio(config, r)).total();
  return total;
}

ScheduleComparison compare_schedules(const ModelConfig& config, double one_pass_ratio,
                                     const std::vector<double>& gradual) {
  ScheduleComparison c;
  c.one_pass_macs = count_flops(config, seq_len_for_ratio(config, one_pass_ratio)).total;
  c.gradual_macs = gradual_macs(config, gradual);
  c.equivalent_one_pass_ratio = ratio_for_macs(config, static_cast<double>(c.gradual_macs));
  return c;
}

std::vector<double> staged_schedule(std::size_t depth, const std::vector<std::pair<std::size_t, double>>& stages) {
  std::vector<double> out(depth, 1.0);
  for (auto [from, ratio] : stages)
    for (std::size_t l = from; l < depth; ++l) out[l] = ratio;
  return out;
}

std::vector<double> dynamic_vit_schedule(std::size_t depth) {
  return staged_schedule(depth, {{3, 0.7}, {6, 0.49}, {9, 0.343}});
}

std::string flops_header() {
  return "# counts are multiply-accumulates (MACs); multiply by 2 for FLOPs";
}

}  // namespace dlvit
