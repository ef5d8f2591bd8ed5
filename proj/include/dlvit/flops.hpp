#pragma once

// Analytic cost model. All counts are multiply-accumulates (one multiply-add
// counts once); raw FLOPs would be twice these numbers.

#include <cstdint>
#include <string>
#include <vector>

#include "dlvit/vit.hpp"

namespace dlvit {

struct BlockMacs {
  std::uint64_t qkv = 0;              // 3 S d^2
  std::uint64_t scores = 0;           // S^2 d
  std::uint64_t weighted_values = 0;  // S^2 d
  std::uint64_t out_proj = 0;         // S d^2
  std::uint64_t mlp = 0;              // 2 S d (ratio d)

  std::uint64_t total() const { return qkv + scores + weighted_values + out_proj + mlp; }
};

struct FlopsReport {
  ModelConfig config;
  std::size_t seq_len = 0;  // S, class token included
  BlockMacs per_block;      // one block at S
  std::uint64_t embed = 0;  // patch projection over all N patches
  std::uint64_t head = 0;
  std::uint64_t filter = 0;  // token filter MLP over all N patches, 0 without a filter
  std::uint64_t total = 0;   // at seq_len
  std::uint64_t full_total = 0;  // at S = N + 1, same filter setting
  std::uint64_t params = 0;

  std::uint64_t blocks_total() const { return per_block.total() * config.depth; }
};

struct FilterShape {
  bool present = false;
  bool use_global = true;
};

// kept_tokens is the sequence length S fed to the blocks, 1 <= S <= N + 1.
FlopsReport count_flops(const ModelConfig& config, std::size_t kept_tokens, FilterShape filter = {});

// Same polynomial with a real-valued sequence length; used for bisection.
double macs_at(const ModelConfig& config, double seq_len, FilterShape filter = {});

// Learnable scalars of the backbone.
std::uint64_t params_count(const ModelConfig& config);
// Token filter widths [in -> 2d -> 100 -> 1]; in = 2d with the global feature, d without.
std::uint64_t filter_params_count(std::size_t dim, bool use_global = true);
std::uint64_t params_count(const ModelConfig& config, FilterShape filter);

// Sequence length kept by a keep ratio: ceil(ratio * N) + 1.
std::size_t seq_len_for_ratio(const ModelConfig& config, double ratio);

struct SweepRow {
  double ratio = 0;
  std::size_t seq_len = 0;
  std::uint64_t macs = 0;
  double speedup = 0;  // full MACs / MACs
};

std::vector<SweepRow> sweep_keep_ratio(const ModelConfig& config, const std::vector<double>& ratios,
                                       FilterShape filter = {});

// Keep ratio in (0, 1] whose continuous MAC count equals target; ConfigError if
// the target lies outside the attainable range.
double ratio_for_macs(const ModelConfig& config, double target_macs, FilterShape filter = {});

// One-pass filtering vs. per-layer (gradual) token reduction.
struct ScheduleComparison {
  std::uint64_t one_pass_macs = 0;
  std::uint64_t gradual_macs = 0;
  // One-pass keep ratio with the same MACs as the gradual schedule.
  double equivalent_one_pass_ratio = 0;
};

// gradual[l] is the keep ratio in effect for block l (size == depth).
std::uint64_t gradual_macs(const ModelConfig& config, const std::vector<double>& gradual);
ScheduleComparison compare_schedules(const ModelConfig& config, double one_pass_ratio,
                                     const std::vector<double>& gradual);

// Per-block ratios for a staged schedule: from block index stages[j].first
// (0-based) onwards the ratio is stages[j].second.
std::vector<double> staged_schedule(std::size_t depth, const std::vector<std::pair<std::size_t, double>>& stages);
// Token reduction at blocks 4, 7 and 10 (1-based) to 0.7, 0.49 and 0.343 of N.
std::vector<double> dynamic_vit_schedule(std::size_t depth = 12);

std::string flops_header();

}  // namespace dlvit
