// Acceptance harness: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails. Usage: acceptance [work_dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dlvit/bench.hpp"
#include "dlvit/checkpoint.hpp"
#include "dlvit/experiment.hpp"
#include "dlvit/flops.hpp"
#include "dlvit/pipeline.hpp"
#include "dlvit/scorer.hpp"
#include "model_checks.hpp"
#include "op_gradient_suite.hpp"

using namespace dlvit;
using namespace dlvit::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

int failures = 0;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void verdict(int id, bool pass, const std::string& detail, double seconds) {
  std::printf("criterion %2d: %s  %s  [%.1fs]\n", id, pass ? "PASS" : "FAIL", detail.c_str(), seconds);
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void progress(const std::string& s) {
  std::fprintf(stderr, "  .. %s\n", s.c_str());
  std::fflush(stderr);
}

// ---- 1: finite-difference gradients ------------------------------------------

void gradients() {
  const auto t0 = Clock::now();
  std::map<std::string, double> worst;
  double model_worst = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    for (const auto& [op, e] : op_gradient_errors(seed)) worst[op] = std::max(worst[op], e);
    model_worst = std::max(model_worst, model_gradient_trial(seed).max_rel_error);
  }
  std::string bad;
  double op_worst = 0;
  for (const auto& [op, e] : worst) {
    op_worst = std::max(op_worst, e);
    if (!(e < 1e-3)) bad += " " + op;
  }
  const double secs = since(t0);
  const bool pass = bad.empty() && model_worst < 1e-3 && secs < 60;
  verdict(1, pass,
          fmt("%zu ops, worst op error %.2e, depth-2 model worst %.2e over 100 seeds%s", worst.size(), op_worst,
              model_worst, bad.empty() ? "" : (" failing:" + bad).c_str()),
          secs);
}

// ---- 2: masked vs reduced sequences --------------------------------------------

void drop_vs_mask() {
  const auto t0 = Clock::now();
  std::vector<ModelConfig> configs(4);
  configs[1].depth = 2;
  configs[2].patch_size = 8;
  configs[2].heads = 2;
  configs[3].dim = 32;
  configs[3].depth = 8;
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed)
    worst = std::max(worst, drop_vs_mask_trial(configs[seed % configs.size()], 1000 + seed));
  const double secs = since(t0);
  verdict(2, worst <= 1e-5 && secs < 120, fmt("1000 pairs, max relative logit difference %.2e", worst), secs);
}

// ---- 3: batched scoring vs one-at-a-time ----------------------------------------

void scorer_oracle() {
  const auto t0 = Clock::now();
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.depth = 2;
  c.heads = 2;
  c.dim = 16;
  c.mlp_ratio = 2;
  c.num_classes = 4;
  SplitMix64 rng(77);
  VitModel model = VitModel::init(c, rng());
  randomize(model, rng(), 0.3);
  double worst = 0;
  std::size_t count = 0;
  for (int img = 0; img < 50; ++img) {
    const auto pixels = random_image(c, rng);
    const int label = static_cast<int>(rng.below(c.num_classes));
    const TokenMatrix tokens = model.embed(pixels);
    const auto recs = score_image(model, tokens, label);
    const std::vector<int> y{label};
    for (const auto& r : recs) {
      KeepMask m = KeepMask::all(c.num_patches());
      m.set(r.token_index, false);
      const double li = cross_entropy_rows(model.forward(tokens, &m), y)[0];
      worst = std::max(worst, std::fabs(li - r.masked_loss));
      ++count;
    }
    const double l = cross_entropy_rows(model.forward(tokens), y)[0];
    worst = std::max(worst, std::fabs(l - recs.front().base_loss));
  }
  verdict(3, worst <= 1e-6 && count == 50 * c.num_patches(),
          fmt("%zu masked losses over 50 images (N=16), max abs difference %.2e", count, worst), since(t0));
}

// ---- 4, 5: analytic anchors --------------------------------------------------------

void mac_anchor() {
  const auto t0 = Clock::now();
  const ModelConfig t = ModelConfig::deit_tiny();
  const FlopsReport r = count_flops(t, t.num_patches() + 1);
  const double macs = static_cast<double>(r.total), params = static_cast<double>(params_count(t));
  const bool pass = std::fabs(macs / 1.3e9 - 1) <= 0.10 && std::fabs(params / 5.7e6 - 1) <= 0.03;
  verdict(4, pass, fmt("DeiT-T %.4g MACs (1.3G +-10%%), %.4g params (5.7M +-3%%)", macs, params), since(t0));
}

void reduction_anchor() {
  const auto t0 = Clock::now();
  const ModelConfig t = ModelConfig::deit_tiny();
  std::vector<double> ratios;
  for (int i = 501; i < 800; ++i) ratios.push_back(i / 1000.0);
  double best_ratio = 0, best_err = 1e9;
  for (const auto& row : sweep_keep_ratio(t, ratios)) {
    const double err = std::fabs(static_cast<double>(row.macs) / 0.7e9 - 1);
    if (err < best_err) {
      best_err = err;
      best_ratio = row.ratio;
    }
  }
  verdict(5, best_ratio > 0.5 && best_ratio < 0.8 && best_err < 0.05,
          fmt("keep ratio %.3f gives MACs within %.2f%% of 0.7G", best_ratio, 100 * best_err), since(t0));
}

// ---- 6, 7, 8, 10: desk experiment ----------------------------------------------------

struct SeedResult {
  std::uint64_t seed = 0;
  EvalReport learned, random, random_init;
};

struct Desk {
  RunConfig config;
  VitModel backbone;
  Dataset train, val, scored;
  std::vector<DeltaLossRecord> records;  // unlabelled
  EvalReport baseline;
  FilterStage first_filter;  // seed 1, before fine-tuning
  std::vector<SeedResult> seeds;
  double seconds_seed1 = 0;
};

Desk run_desk(const fs::path& work) {
  Desk d;
  RunConfig& c = d.config;
  c.seed = 1;
  const auto t0 = Clock::now();
  d.train = resolve_split(c, false);
  d.val = resolve_split(c, true);
  d.scored = head(d.train, c.score.images);

  fs::create_directories(work);
  StageRunner stages(work);
  const fs::path bb = work / "backbone.ckpt", rec = work / "dl_records.csv";
  stages.run("pretrain", config_sections_json(c, {"model", "data", "pretrain", "seed"}), {}, {bb}, [&] {
    progress("pretraining the desk backbone");
    save_checkpoint(bb, checkpoint_tensors(pretrain(c.model, d.train, pretrain_schedule(c))));
  });
  d.backbone = VitModel::from_tensors(load_checkpoint(bb));
  stages.run("score", config_sections_json(c, {"score"}), {bb}, {rec}, [&] {
    progress("scoring delta loss");
    write_records_csv(rec, score_dataset(d.backbone, d.scored, score_options(c), c.thread_count()));
  });
  d.records = read_records_csv(rec);

  EvalOptions eo;
  eo.policy = mask_policy(c, FilterMode::all_keep, 1.0);
  eo.measure_throughput = false;
  eo.threads = c.thread_count();
  d.baseline = evaluate(d.backbone, nullptr, d.val, eo);
  progress(fmt("backbone ready, all-keep top-1 %.4f [%.0fs]", d.baseline.top1, since(t0)));

  for (std::uint64_t s = 1; s <= 3; ++s) {
    RunConfig rc = c;
    rc.seed = s;
    rc.filter.init_seed = c.filter.init_seed + 10 * (s - 1);
    auto recs = d.records;
    const FilterStage st = run_filter_stage(rc, d.backbone, d.scored, recs);
    if (s == 1) d.first_filter = st;
    SeedResult r;
    r.seed = s;
    r.learned = finetune_arm(rc, d.backbone, st.filter, d.train, d.val, mask_policy(rc, FilterMode::learned, 1.0)).report;
    const double k = r.learned.keep_ratio;
    progress(fmt("seed %llu learned top-1 %.4f keep %.3f [%.0fs]", static_cast<unsigned long long>(s), r.learned.top1, k,
                 since(t0)));
    if (s == 1) d.seconds_seed1 = since(t0);
    r.random = finetune_arm(rc, d.backbone, FilterMLP{}, d.train, d.val, mask_policy(rc, FilterMode::random_discard, k))
                   .report;
    progress(fmt("seed %llu random top-1 %.4f [%.0fs]", static_cast<unsigned long long>(s), r.random.top1, since(t0)));
    const FilterMLP init = FilterMLP::init(d.backbone.config().dim, filter_meta(rc, st.rho), rc.filter.init_seed + 1);
    r.random_init =
        finetune_arm(rc, d.backbone, init, d.train, d.val, mask_policy(rc, FilterMode::random_init, k)).report;
    progress(fmt("seed %llu random-init top-1 %.4f [%.0fs]", static_cast<unsigned long long>(s), r.random_init.top1,
                 since(t0)));
    d.seeds.push_back(r);
  }
  return d;
}

void end_to_end(const Desk& d) {
  const SeedResult& s = d.seeds.front();
  const double gap = d.baseline.top1 - s.learned.top1;
  const bool pass = gap <= 0.03 && s.learned.keep_ratio <= 0.7 && s.learned.keep_ratio >= 0.4;
  verdict(6, pass,
          fmt("all-keep %.2f%%, learned %.2f%% (gap %.2f pp), keep ratio %.3f, rho %.4g", 100 * d.baseline.top1,
              100 * s.learned.top1, 100 * gap, s.learned.keep_ratio, d.first_filter.rho),
          d.seconds_seed1);
}

void ablation(const Desk& d, double seconds) {
  bool pass = true;
  std::string detail;
  for (const auto& s : d.seeds) {
    const double g_random = s.learned.top1 - s.random.top1, g_init = s.learned.top1 - s.random_init.top1;
    pass = pass && g_random > 0 && g_init > 0;
    detail += fmt("seed %llu: learned %.2f random %.2f random-init %.2f; ", static_cast<unsigned long long>(s.seed),
                  100 * s.learned.top1, 100 * s.random.top1, 100 * s.random_init.top1);
  }
  verdict(7, pass, detail + "keep matched to the learned filter", seconds);
}

void spatial(const Desk& d) {
  const auto t0 = Clock::now();
  const std::size_t threads = d.config.thread_count();
  const RelevanceSplit rel = keep_probability_by_relevance(d.backbone, d.first_filter.filter, d.val, threads);
  const SpatialGrid grid = mask_average_grid(d.backbone, &d.first_filter.filter, d.val,
                                             mask_policy(d.config, FilterMode::learned, 1.0), threads);
  const BorderCenter bc = border_vs_center(grid);
  const double border = bc.border, center = bc.center;
  const bool pass = rel.object - rel.background >= 0.1 && border < center;
  verdict(8, pass,
          fmt("keep probability object %.3f background %.3f (gap %.3f); mask average border %.3f center %.3f",
              rel.object, rel.background, rel.object - rel.background, border, center),
          since(t0));
}

void labels(const Desk& d) {
  const auto t0 = Clock::now();
  const auto& recs = d.records;
  std::vector<double> rhos;
  for (int i = 0; i <= 60; ++i) rhos.push_back(-0.003 + i * 1e-4);
  rhos.push_back(d.first_filter.rho);
  std::sort(rhos.begin(), rhos.end());
  bool monotone = true;
  std::vector<int> prev = pseudo_label(recs, rhos.front());
  for (std::size_t i = 1; i < rhos.size(); ++i) {
    const auto cur = pseudo_label(recs, rhos[i]);
    for (std::size_t t = 0; t < cur.size(); ++t) monotone = monotone && !(cur[t] && !prev[t]);
    prev = cur;
  }
  const auto literal = with_sign(recs, DlSign::eq7_literal);
  bool signs = true, complement = true;
  std::size_t compared = 0;
  for (const double rho : {0.0, 1e-4, d.first_filter.rho, 2e-3}) {
    const auto a = pseudo_label(recs, rho), b = pseudo_label(literal, rho);
    for (std::size_t t = 0; t < recs.size(); ++t) {
      signs = signs && literal[t].dl == -recs[t].dl;
      if (std::fabs(recs[t].dl) > rho) {
        complement = complement && a[t] != b[t];
        ++compared;
      }
    }
  }
  verdict(10, monotone && signs && complement,
          fmt("%zu rho values monotone: %s; eq7-literal dl = -importance dl: %s; complementary on %zu tokens: %s",
              rhos.size(), monotone ? "yes" : "no", signs ? "yes" : "no", compared, complement ? "yes" : "no"),
          since(t0));
}

// ---- 9: throughput ----------------------------------------------------------------

// Each setting is benchmarked three times; the medians of identical runs
// must agree within 15%.
void throughput() {
  const auto t0 = Clock::now();
  ModelConfig c;
  c.depth = 8;
  const VitModel model = VitModel::init(c, 3);
  const FilterMLP filter = FilterMLP::init(c.dim, {}, 5);
  SyntheticSpec spec;
  spec.seed = 9;
  const Dataset data = generate_synthetic(spec, 40);
  BenchOptions full_opts, half_opts;
  for (auto* o : {&full_opts, &half_opts}) {
    o->batch = 64;
    o->warmup = 128;
    o->repeats = 7;
  }
  full_opts.policy.mode = FilterMode::all_keep;
  half_opts.policy.mode = FilterMode::random_init;
  half_opts.policy.keep_ratio = 0.5;
  std::vector<double> full, half;
  double keep_max = 0, pass_spread = 0;
  for (int run = 0; run < 3; ++run) {
    const BenchResult a = bench_throughput(model, nullptr, data, full_opts);
    const BenchResult b = bench_throughput(model, &filter, data, half_opts);
    full.push_back(a.images_per_s);
    half.push_back(b.images_per_s);
    keep_max = std::max(keep_max, b.keep_ratio.max);
    pass_spread = std::max({pass_spread, a.spread, b.spread});
  }
  auto rel_range = [](const std::vector<double>& v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return (*hi - *lo) / *lo;
  };
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  const double speedup = median(half) / median(full);
  const double var_full = rel_range(full), var_half = rel_range(half);
  const bool pass = keep_max <= 0.5 && speedup >= 1.2 && var_full < 0.15 && var_half < 0.15;
  verdict(9, pass,
          fmt("depth 8, keep <= %.3f with filter: %.1f vs %.1f images/s (%.2fx); identical runs differ by %.1f%% / "
              "%.1f%% (widest pass spread within a run %.1f%%), 1 thread",
              keep_max, median(half), median(full), speedup, 100 * var_half, 100 * var_full, 100 * pass_spread),
          since(t0));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_work");
  try {
    gradients();
    drop_vs_mask();
    scorer_oracle();
    mac_anchor();
    reduction_anchor();
    throughput();
    const auto t0 = Clock::now();
    const Desk desk = run_desk(work);
    end_to_end(desk);
    ablation(desk, since(t0));
    spatial(desk);
    labels(desk);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criterion failure(s)\n", failures);
  return failures ? 1 : 0;
}
