#include "dlvit/bench.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "dlvit/error.hpp"

namespace dlvit {

BenchResult bench_throughput(const VitModel& model, const FilterMLP* filter, const Dataset& data,
                             const BenchOptions& opts) {
  if (data.samples.empty()) throw ContractError("bench: empty dataset");
  const std::span<const Sample> all(data.samples);
  BenchResult r;
  r.threads = std::max<std::size_t>(1, opts.threads);
  r.batch = std::max<std::size_t>(1, opts.batch);
  r.images = all.size();

  std::vector<double> ratios;
  const double n = static_cast<double>(model.config().num_patches());
  for (const auto& p : infer(model, filter, all, opts.policy)) ratios.push_back(static_cast<double>(p.mask.kept_count()) / n);
  r.keep_ratio = moments(ratios);

  warm_up(model, filter, all, opts.policy, opts.warmup, r.batch);
  const std::size_t repeats = std::max<std::size_t>(5, opts.repeats);
  for (std::size_t i = 0; i < repeats; ++i) {
    const double sec = timed_inference_pass(model, filter, all, opts.policy, r.batch, r.threads);
    r.runs.push_back(static_cast<double>(all.size()) / sec);
  }
  std::vector<double> sorted = r.runs;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t k = sorted.size();
  r.images_per_s = k % 2 ? sorted[k / 2] : 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]);
  r.spread = (sorted.back() - sorted.front()) / r.images_per_s;
  return r;
}

void write_bench_csv(const std::filesystem::path& path, const std::vector<std::pair<std::string, BenchResult>>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "name,images_per_s,spread,keep_ratio_mean,keep_ratio_min,keep_ratio_max,threads,batch\n";
  char buf[256];
  for (const auto& [name, r] : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.2f,%.4f,%.4f,%.4f,%.4f,%zu,%zu\n", name.c_str(), r.images_per_s, r.spread,
                  r.keep_ratio.mean, r.keep_ratio.min, r.keep_ratio.max, r.threads, r.batch);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::string bench_markdown(const std::vector<std::pair<std::string, BenchResult>>& rows) {
  std::string s = "| run | images/s | spread | keep ratio | threads | batch |\n|---|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& [name, r] : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %.1f | %.1f%% | %.3f | %zu | %zu |\n", name.c_str(), r.images_per_s,
                  100.0 * r.spread, r.keep_ratio.mean, r.threads, r.batch);
    s += buf;
  }
  return s;
}

}  // namespace dlvit
