#pragma once

// Wall-clock inference throughput.

#include <filesystem>
#include <string>
#include <vector>

#include "dlvit/pipeline.hpp"
#include "dlvit/stats.hpp"

namespace dlvit {

struct BenchOptions {
  MaskPolicy policy;
  std::size_t batch = 64;
  std::size_t warmup = 64;
  std::size_t threads = 1;
  std::size_t repeats = 5;  // timed passes over the dataset, at least 5
};

struct BenchResult {
  double images_per_s = 0;  // median over the timed passes
  std::vector<double> runs;
  double spread = 0;  // (max - min) / median
  std::size_t threads = 1, batch = 0, images = 0;
  Moments keep_ratio;  // per-image kept fraction
};

// ContractError on an empty dataset.
BenchResult bench_throughput(const VitModel& model, const FilterMLP* filter, const Dataset& data,
                             const BenchOptions& opts);

// name,images_per_s,spread,keep_ratio_mean,keep_ratio_min,keep_ratio_max,threads,batch
void write_bench_csv(const std::filesystem::path& path, const std::vector<std::pair<std::string, BenchResult>>& rows);
std::string bench_markdown(const std::vector<std::pair<std::string, BenchResult>>& rows);

}  // namespace dlvit
