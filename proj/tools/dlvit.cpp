// dlvit: data generation, training, delta-loss scoring, filtering, evaluation
// and efficiency reports from one binary.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dlvit/bench.hpp"
#include "dlvit/checkpoint.hpp"
#include "dlvit/error.hpp"
#include "dlvit/experiment.hpp"
#include "dlvit/flops.hpp"

namespace fs = std::filesystem;
using namespace dlvit;

namespace {

struct Flags {
  std::string config, out_dir, data, val, checkpoint, records, out;
  std::optional<std::size_t> threads, epochs, pretrain_epochs, finetune_epochs, batch, warmup, depth, score_images,
      per_class;
  std::optional<std::uint64_t> seed;
  std::optional<double> rho, label_ratio, keep_ratio;
  std::optional<float> threshold;
  std::optional<std::string> use_global, filter, dl_sign, mask_mode, optimizer;
  bool mask_pre_pos = false, no_filter_grad = false;
  std::vector<double> rho_list, ratios;
  double one_pass = 0.5;
  std::string split = "both";
};

void add_common(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON config overlaying the defaults")->check(CLI::ExistingFile);
  app->add_option("--out-dir", f.out_dir, "Output directory");
  app->add_option("--threads", f.threads, "Worker threads (default $DLVIT_THREADS or all cores)");
  app->add_option("--seed", f.seed, "Run seed");
  app->add_option("--data", f.data, "Training manifest CSV or directory");
  app->add_option("--val", f.val, "Validation manifest CSV or directory");
  app->add_option("--checkpoint", f.checkpoint, "Checkpoint to read");
  app->add_option("--depth", f.depth, "Transformer depth");
  app->add_option("--rho", f.rho, "Pseudo-label threshold on dl");
  app->add_option("--label-ratio", f.label_ratio, "Pick rho so this fraction of tokens is labelled keep");
  app->add_option("--threshold", f.threshold, "Filter keep threshold on p");
  app->add_option("--use-global", f.use_global, "Global feature in filter descriptors")->check(CLI::IsMember({"on", "off"}));
  app->add_option("--filter", f.filter, "Filter mode")->check(CLI::IsMember({"learned", "random", "all-keep", "random-init"}));
  app->add_option("--keep-ratio", f.keep_ratio, "Kept fraction for random and random-init modes");
  app->add_option("--dl-sign", f.dl_sign, "Delta-loss sign convention")->check(CLI::IsMember({"importance", "eq7-literal"}));
  app->add_option("--mask-mode", f.mask_mode, "How dropped tokens are hidden in training")->check(CLI::IsMember({"attn", "zero-embed"}));
  app->add_flag("--mask-pre-pos", f.mask_pre_pos, "zero-embed: keep the positional term of dropped tokens");
  app->add_flag("--no-filter-grad", f.no_filter_grad, "Freeze the filter during fine-tuning");
  app->add_option("--pretrain-epochs", f.pretrain_epochs, "Pretraining epochs");
  app->add_option("--finetune-epochs", f.finetune_epochs, "Fine-tuning epochs");
  app->add_option("--score-images", f.score_images, "Training images scored for delta loss (0: all)");
}

// defaults < config file < flags
RunConfig build_config(const Flags& f, const std::string& command) {
  RunConfig c;
  if (!f.config.empty()) c = load_config_file(c, f.config);
  if (!f.out_dir.empty()) c.out_dir = f.out_dir;
  if (f.threads) c.threads = *f.threads;
  if (f.seed) c.seed = *f.seed;
  if (!f.data.empty()) c.data.train = f.data;
  if (!f.val.empty()) c.data.val = f.val;
  if (f.depth) c.model.depth = *f.depth;
  if (f.rho) {
    c.label.has_rho = true;
    c.label.rho = *f.rho;
  }
  if (f.label_ratio) {
    c.label.has_rho = false;
    c.label.label_ratio = *f.label_ratio;
  }
  if (!f.rho_list.empty()) c.label.rho_list = f.rho_list;
  if (f.threshold) c.filter.threshold = *f.threshold;
  if (f.use_global) c.filter.use_global = *f.use_global == "on";
  if (f.filter) c.filter.mode = *f.filter;
  if (f.keep_ratio) c.filter.keep_ratio = *f.keep_ratio;
  if (f.dl_sign) c.score.dl_sign = *f.dl_sign;
  if (f.mask_mode) c.finetune.mask_mode = *f.mask_mode;
  if (f.mask_pre_pos) c.finetune.mask_pre_pos = true;
  if (f.no_filter_grad) c.finetune.filter_grad = false;
  if (f.pretrain_epochs) c.pretrain.epochs = *f.pretrain_epochs;
  if (f.finetune_epochs) c.finetune.epochs = *f.finetune_epochs;
  if (f.score_images) c.score.images = *f.score_images;
  if (f.per_class) c.data.train_per_class = c.data.val_per_class = *f.per_class;
  if (command == "pretrain") {
    if (f.epochs) c.pretrain.epochs = *f.epochs;
    if (f.optimizer) c.pretrain.optimizer = *f.optimizer;
    if (f.batch) c.pretrain.batch = *f.batch;
  } else if (command == "finetune") {
    if (f.epochs) c.finetune.epochs = *f.epochs;
    if (f.optimizer) c.finetune.optimizer = *f.optimizer;
    if (f.batch) c.finetune.batch = *f.batch;
  } else {
    if (f.batch) c.bench.batch = *f.batch;
    if (f.warmup) c.bench.warmup = *f.warmup;
  }
  c.validate();
  return c;
}

void note(const char* fmt, auto... args) {
  std::fprintf(stderr, fmt, args...);
  std::fputc('\n', stderr);
}

EpochCallback epoch_printer(const std::string& stage) {
  return [stage](const EpochLog& e) {
    note("%s epoch %zu  lr %.3g  loss %.4f  acc %.4f  keep %.3f", stage.c_str(), e.epoch + 1, e.lr, e.loss,
         e.accuracy, e.keep_ratio);
  };
}

void write_epoch_log(const fs::path& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path);
  out << "epoch,lr,loss,accuracy,keep_ratio\n";
  for (const auto& e : log) out << e.epoch << ',' << e.lr << ',' << e.loss << ',' << e.accuracy << ',' << e.keep_ratio << '\n';
  if (!out) throw IoError("cannot write " + path.string());
}

struct Loaded {
  VitModel model;
  std::optional<FilterMLP> filter;
};

Loaded load_models(const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  const TensorMap t = load_checkpoint(path);
  Loaded l;
  l.model = VitModel::from_tensors(t);
  if (FilterMLP::present_in(t)) l.filter = FilterMLP::from_tensors(t);
  return l;
}

// The filter a policy needs, or null. Learned modes need one in the checkpoint.
const FilterMLP* policy_filter(const MaskPolicy& p, const Loaded& l, std::optional<FilterMLP>& fresh,
                               const RunConfig& c) {
  if (p.mode == FilterMode::learned) {
    if (!l.filter) throw ConfigError("--filter learned needs a checkpoint with a trained filter");
    return &*l.filter;
  }
  if (p.mode == FilterMode::random_init) {
    fresh = FilterMLP::init(l.model.config().dim, filter_meta(c, 0.0), c.filter.init_seed);
    return &*fresh;
  }
  return nullptr;
}

MaskPolicy policy_for(const RunConfig& c, const Loaded* l, bool threshold_flag) {
  const FilterMode mode = parse_filter_mode(c.filter.mode);
  MaskPolicy p = mask_policy(c, mode, c.filter.keep_ratio);
  if (mode == FilterMode::learned && l && l->filter && !threshold_flag) p.threshold = l->filter->meta().threshold;
  if ((mode == FilterMode::random_discard || mode == FilterMode::random_init) && p.keep_ratio <= 0)
    throw ConfigError("--filter " + c.filter.mode + " needs --keep-ratio in (0, 1]");
  return p;
}

std::vector<DeltaLossRecord> load_records(const Flags& f, const RunConfig& c) {
  const fs::path p = f.records.empty() ? fs::path(c.out_dir) / "dl_records.csv" : fs::path(f.records);
  if (!fs::exists(p)) throw IoError("records not found: " + p.string() + " (run score-dl first or pass --records)");
  return read_records_csv(p);
}

fs::path out_path(const RunConfig& c, const std::string& name) { return fs::path(c.out_dir) / name; }

// Pipeline stage in progress, reported when a command fails.
std::string g_stage;
fs::path g_stage_dir;

void report_failure(const std::string& command, const char* what) {
  std::cerr << "dlvit " << command << ": " << what << '\n';
  if (!g_stage.empty())
    std::cerr << "stage '" << g_stage << "' failed; completed artifacts and stage markers are in " << g_stage_dir.string()
              << '\n';
}

bool run_stage(StageRunner& stages, const fs::path& dir, const std::string& name, const std::string& config_text,
               const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs,
               const std::function<void()>& body) {
  g_stage = name;
  g_stage_dir = dir;
  const bool r = stages.run(name, config_text, inputs, outputs, body);
  g_stage.clear();
  return r;
}

// ---- commands ----------------------------------------------------------------

int cmd_gen_data(const RunConfig& c, const Flags& f) {
  for (const bool val : {false, true}) {
    if ((f.split == "train" && val) || (f.split == "val" && !val)) continue;
    const Dataset d = generate_synthetic(synthetic_spec(c, val), val ? c.data.val_per_class : c.data.train_per_class);
    const fs::path dir = out_path(c, val ? "data/val" : "data/train");
    write_dataset(dir, d, val ? "val" : "train");
    note("wrote %zu images to %s", d.size(), dir.string().c_str());
  }
  return 0;
}

int cmd_pretrain(const RunConfig& c) {
  const Dataset train = resolve_split(c, false);
  train.check_compatible(c.model);
  std::vector<EpochLog> log;
  const VitModel m = pretrain(c.model, train, pretrain_schedule(c), &log, epoch_printer("pretrain"));
  save_checkpoint(out_path(c, "backbone.ckpt"), checkpoint_tensors(m));
  write_epoch_log(out_path(c, "pretrain_log.csv"), log);
  note("saved %s", out_path(c, "backbone.ckpt").string().c_str());
  return 0;
}

int cmd_score(const RunConfig& c, const Flags& f) {
  const Loaded l = load_models(f.checkpoint);
  const Dataset train = head(resolve_split(c, false), c.score.images);
  train.check_compatible(l.model.config());
  const auto recs = score_dataset(l.model, train, score_options(c), c.thread_count());
  write_records_csv(f.out.empty() ? out_path(c, "dl_records.csv") : fs::path(f.out), recs);
  const DlStatistics s = write_dl_statistics(c.out_dir, recs, l.model.config().grid_side());
  note("scored %zu tokens over %zu images; dl mean %.3g sd %.3g", recs.size(), train.size(), s.moments.mean,
       s.moments.stddev);
  return 0;
}

int cmd_label(const RunConfig& c, const Flags& f) {
  auto recs = load_records(f, c);
  const double rho = choose_rho(c, recs);
  apply_labels(recs, rho);
  std::size_t pos = 0;
  for (const auto& r : recs) pos += r.label == 1;
  write_records_csv(f.out.empty() ? out_path(c, "labels.csv") : fs::path(f.out), recs);
  std::printf("rho %.6g  keep labels %zu / %zu (%.3f)\n", rho, pos, recs.size(),
              recs.empty() ? 0.0 : static_cast<double>(pos) / recs.size());
  return 0;
}

int cmd_train_filter(const RunConfig& c, const Flags& f) {
  const Loaded l = load_models(f.checkpoint);
  Flags g = f;
  if (g.records.empty()) g.records = out_path(c, "labels.csv").string();
  auto recs = load_records(g, c);
  for (const auto& r : recs)
    if (r.label < 0) throw ConfigError("records in " + g.records + " are unlabelled; run label first");
  const Dataset scored = select_scored(resolve_split(c, false), recs);
  const double rho = recs.empty() ? 0.0 : [&] {
    // rho is not stored per record; recover the tightest bound consistent with the labels
    double lo = -std::numeric_limits<double>::infinity();
    for (const auto& r : recs)
      if (r.label == 0) lo = std::max(lo, r.dl);
    return lo;
  }();
  const FilterMeta meta = filter_meta(c, c.label.has_rho ? c.label.rho : rho);
  const FilterCorpus corpus = build_corpus(l.model, scored, recs, meta, c.thread_count());
  FilterTrainReport rep;
  const FilterMLP filter =
      train_filter(corpus, FilterMLP::init(l.model.config().dim, meta, c.filter.init_seed), filter_train_options(c), &rep);
  save_checkpoint(out_path(c, "filter.ckpt"), checkpoint_tensors(l.model, &filter));
  std::printf("filter: %zu epochs%s, train accuracy %.4f, %zu / %zu keep labels\n", rep.epochs,
              rep.early_stopped ? " (early stop)" : "", rep.train_accuracy, corpus.positives(), corpus.labels.size());
  return 0;
}

int cmd_finetune(const RunConfig& c, const Flags& f) {
  const Loaded l = load_models(f.checkpoint);
  const MaskPolicy p = policy_for(c, &l, f.threshold.has_value());
  std::optional<FilterMLP> fresh;
  const FilterMLP* filter = policy_filter(p, l, fresh, c);
  const Dataset train = resolve_split(c, false);
  const FinetuneResult r =
      finetune(l.model, filter ? *filter : FilterMLP{}, train, finetune_options(c, p), epoch_printer("finetune"));
  save_checkpoint(out_path(c, "finetuned.ckpt"),
                  checkpoint_tensors(r.model, p.uses_filter() ? &r.filter : nullptr));
  write_epoch_log(out_path(c, "finetune_log.csv"), r.log);
  note("saved %s", out_path(c, "finetuned.ckpt").string().c_str());
  return 0;
}

// Evaluation commands read --data when --val is absent.
Dataset eval_split(const RunConfig& c, const Flags& f) {
  if (!f.data.empty() && f.val.empty()) return load_data_arg(f.data);
  return resolve_split(c, true);
}

int cmd_infer(const RunConfig& c, const Flags& f) {
  const Loaded l = load_models(f.checkpoint);
  const MaskPolicy p = policy_for(c, &l, f.threshold.has_value());
  std::optional<FilterMLP> fresh;
  const FilterMLP* filter = policy_filter(p, l, fresh, c);
  const Dataset val = eval_split(c, f);
  const auto preds = infer(l.model, filter, val.samples, p);
  const fs::path path = out_path(c, "predictions.csv");
  std::ofstream out(path);
  out << "image_id,label,predicted,kept,kept_indices\n";
  for (std::size_t i = 0; i < preds.size(); ++i) {
    out << preds[i].image_id << ',' << val.samples[i].label << ',' << preds[i].predicted << ','
        << preds[i].mask.kept_count() << ',';
    const auto idx = preds[i].mask.kept_indices();
    for (std::size_t k = 0; k < idx.size(); ++k) out << (k ? " " : "") << idx[k];
    out << '\n';
  }
  if (!out) throw IoError("cannot write " + path.string());
  note("wrote %zu predictions to %s", preds.size(), path.string().c_str());
  return 0;
}

int cmd_eval(const RunConfig& c, const Flags& f) {
  const Loaded l = load_models(f.checkpoint);
  const MaskPolicy p = policy_for(c, &l, f.threshold.has_value());
  std::optional<FilterMLP> fresh;
  const FilterMLP* filter = policy_filter(p, l, fresh, c);
  const Dataset val = eval_split(c, f);
  EvalOptions o;
  o.policy = p;
  o.batch = c.bench.batch;
  o.warmup = c.bench.warmup;
  o.threads = c.thread_count();
  const EvalReport r = evaluate(l.model, filter, val, o);
  std::fputs(format_report(r).c_str(), stdout);
  write_reports_csv(out_path(c, "eval.csv"), {{c.filter.mode, r}});
  return 0;
}

int cmd_bench(const RunConfig& c, const Flags& f) {
  const Loaded l = load_models(f.checkpoint);
  const Dataset val = eval_split(c, f);
  BenchOptions o;
  o.batch = c.bench.batch;
  o.warmup = c.bench.warmup;
  o.repeats = c.bench.repeats;
  o.threads = c.thread_count();
  std::vector<std::pair<std::string, BenchResult>> rows;
  o.policy = mask_policy(c, FilterMode::all_keep, 1.0);
  rows.emplace_back("all-keep", bench_throughput(l.model, nullptr, val, o));
  RunConfig cc = c;
  if (cc.filter.mode != "all-keep") {
    if (cc.filter.mode != "learned" && cc.filter.keep_ratio <= 0) cc.filter.keep_ratio = 0.5;
    o.policy = policy_for(cc, &l, f.threshold.has_value());
    std::optional<FilterMLP> fresh;
    const FilterMLP* filter = policy_filter(o.policy, l, fresh, cc);
    rows.emplace_back(cc.filter.mode, bench_throughput(l.model, filter, val, o));
  }
  write_bench_csv(out_path(c, "bench.csv"), rows);
  const std::string md = bench_markdown(rows);
  std::ofstream(out_path(c, "bench.md")) << md;
  std::fputs(md.c_str(), stdout);
  if (rows.size() == 2)
    std::printf("speedup %.3fx\n", rows[1].second.images_per_s / rows[0].second.images_per_s);
  return 0;
}

void write_mask_stats(const RunConfig& c, const VitModel& model, const FilterMLP& filter, const Dataset& data) {
  MaskPolicy p = mask_policy(c, FilterMode::learned, 1.0);
  p.threshold = filter.meta().threshold;
  const SpatialGrid g = mask_average_grid(model, &filter, data, p, c.thread_count());
  write_grid_csv(out_path(c, "mask_avg_grid.csv"), g);
  const BorderCenter bc = border_vs_center(g);
  std::printf("mask_avg border %.4f  center %.4f\n", bc.border, bc.center);
  if (!data.samples.empty() && !data.samples[0].relevance.empty()) {
    const RelevanceSplit r = keep_probability_by_relevance(model, filter, data, c.thread_count());
    std::printf("keep probability  object %.4f  background %.4f\n", r.object, r.background);
  }
}

int cmd_stats(const RunConfig& c, const Flags& f) {
  std::optional<Loaded> l;
  if (!f.checkpoint.empty()) l = load_models(f.checkpoint);
  const fs::path rec = f.records.empty() ? out_path(c, "dl_records.csv") : fs::path(f.records);
  if (fs::exists(rec)) {
    const auto recs = read_records_csv(rec);
    const std::size_t side = l ? l->model.config().grid_side() : c.model.grid_side();
    const DlStatistics s = write_dl_statistics(c.out_dir, recs, side);
    const Histogram& h = s.histogram;
    std::printf("dl: %zu values, mean %.4g, sd %.4g, modal bin [%.4g, %.4g)\n", static_cast<std::size_t>(h.total),
                s.moments.mean, s.moments.stddev, h.edge(h.mode_bin()), h.edge(h.mode_bin() + 1));
  } else if (!f.records.empty()) {
    throw IoError("records not found: " + rec.string());
  }
  if (l && l->filter) write_mask_stats(c, l->model, *l->filter, eval_split(c, f));
  if (!fs::exists(rec) && !(l && l->filter)) throw ConfigError("stats needs --records or a checkpoint with a filter");
  return 0;
}

int cmd_ablate(const RunConfig& c, const Flags& f) {
  const Loaded l = load_models(f.checkpoint);
  const Dataset train = resolve_split(c, false), val = resolve_split(c, true);
  const Dataset scored = head(train, c.score.images);
  const auto base_records = score_dataset(l.model, scored, score_options(c), c.thread_count());

  const fs::path path = out_path(c, "ablation.csv");
  std::ofstream out(path);
  out << "use_global,rho,filter,top1,top5,keep_ratio,macs_full,macs_filtered\n";
  auto row = [&](const std::string& g, double rho, const std::string& name, const EvalReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.6g,%s,%.4f,%.4f,%.4f,%llu,%llu\n", g.c_str(), rho, name.c_str(), r.top1, r.top5,
                  r.keep_ratio, static_cast<unsigned long long>(r.macs_full),
                  static_cast<unsigned long long>(r.macs_filtered));
    out << buf;
    out.flush();
    std::fputs(buf, stdout);
  };

  EvalOptions eo;
  eo.policy = mask_policy(c, FilterMode::all_keep, 1.0);
  eo.measure_throughput = false;
  eo.threads = c.thread_count();
  row("-", 0.0, "all-keep", evaluate(l.model, nullptr, val, eo));

  std::vector<double> rhos = c.label.rho_list;
  if (rhos.empty()) rhos.push_back(choose_rho(c, base_records));
  for (const bool global : {true, false}) {
    for (const double rho : rhos) {
      RunConfig rc = c;
      rc.filter.use_global = global;
      rc.label.has_rho = true;
      rc.label.rho = rho;
      auto recs = base_records;
      const FilterStage st = run_filter_stage(rc, l.model, scored, recs);
      const std::string g = global ? "on" : "off";
      const Arm learned = finetune_arm(rc, l.model, st.filter, train, val, mask_policy(rc, FilterMode::learned, 1.0),
                                       epoch_printer("learned"));
      row(g, rho, "learned", learned.report);
      const double k = learned.report.keep_ratio;
      const Arm random = finetune_arm(rc, l.model, FilterMLP{}, train, val,
                                      mask_policy(rc, FilterMode::random_discard, k), epoch_printer("random"));
      row(g, rho, "random", random.report);
      const FilterMLP init = FilterMLP::init(l.model.config().dim, filter_meta(rc, rho), rc.filter.init_seed + 1);
      const Arm rinit = finetune_arm(rc, l.model, init, train, val, mask_policy(rc, FilterMode::random_init, k),
                                     epoch_printer("random-init"));
      row(g, rho, "random-init", rinit.report);
    }
  }
  if (!out) throw IoError("cannot write " + path.string());
  return 0;
}

int cmd_pipeline(const RunConfig& c0) {
  RunConfig c = c0;
  const fs::path dir = c.out_dir;
  StageRunner stages(dir);
  const bool synthetic_train = c.data.train.empty(), synthetic_val = c.data.val.empty();
  const fs::path train_manifest = synthetic_train ? dir / "data/train/train.csv" : fs::path(c.data.train);
  const fs::path val_manifest = synthetic_val ? dir / "data/val/val.csv" : fs::path(c.data.val);

  auto ran = [](bool r, const char* stage) { note("%s: %s", stage, r ? "done" : "up to date, skipped"); };

  if (synthetic_train || synthetic_val) {
    std::vector<fs::path> generated;
    if (synthetic_train) generated.push_back(train_manifest);
    if (synthetic_val) generated.push_back(val_manifest);
    ran(run_stage(stages, dir, "data", config_sections_json(c, {"model", "data"}), {}, generated,
                   [&] {
                     if (synthetic_train)
                       write_dataset(dir / "data/train", generate_synthetic(synthetic_spec(c, false), c.data.train_per_class), "train");
                     if (synthetic_val)
                       write_dataset(dir / "data/val", generate_synthetic(synthetic_spec(c, true), c.data.val_per_class), "val");
                   }),
        "data");
  }
  c.data.train = train_manifest.string();
  c.data.val = val_manifest.string();

  const fs::path backbone = dir / "backbone.ckpt";
  ran(run_stage(stages, dir, "pretrain", config_sections_json(c, {"model", "pretrain", "seed"}), {train_manifest},
                 {backbone, dir / "pretrain_log.csv"}, [&] { cmd_pretrain(c); }),
      "pretrain");

  const FilterMode mode = parse_filter_mode(c.filter.mode);
  EvalOptions eo;
  eo.measure_throughput = false;
  eo.threads = c.thread_count();
  if (mode == FilterMode::all_keep) {
    ran(run_stage(stages, dir, "eval", config_sections_json(c, {"filter", "seed"}), {backbone, val_manifest}, {dir / "eval.csv"},
                   [&] {
                     eo.policy = mask_policy(c, mode, 1.0);
                     const EvalReport r = evaluate(VitModel::from_tensors(load_checkpoint(backbone)), nullptr,
                                                   resolve_split(c, true), eo);
                     std::fputs(format_report(r).c_str(), stdout);
                     write_reports_csv(dir / "eval.csv", {{"all-keep", r}});
                   }),
        "eval");
    return 0;
  }

  Flags f;
  f.checkpoint = backbone.string();
  const fs::path records = dir / "dl_records.csv";
  ran(run_stage(stages, dir, "score", config_sections_json(c, {"score"}), {backbone, train_manifest}, {records},
                 [&] { cmd_score(c, f); }),
      "score");
  const fs::path labels = dir / "labels.csv";
  ran(run_stage(stages, dir, "label", config_sections_json(c, {"label"}), {records}, {labels}, [&] { cmd_label(c, f); }), "label");
  const fs::path filter = dir / "filter.ckpt";
  ran(run_stage(stages, dir, "train-filter", config_sections_json(c, {"filter", "label", "score", "seed"}),
                 {backbone, labels, train_manifest}, {filter}, [&] { cmd_train_filter(c, f); }),
      "train-filter");

  const fs::path tuned = dir / "finetuned.ckpt";
  Flags ff;
  ff.checkpoint = (mode == FilterMode::learned ? filter : backbone).string();
  RunConfig fc = c;
  if ((mode == FilterMode::random_discard || mode == FilterMode::random_init) && fc.filter.keep_ratio <= 0) {
    // match the trained filter's keep ratio on the validation set
    const Loaded lf = load_models(filter.string());
    MaskPolicy lp = mask_policy(c, FilterMode::learned, 1.0);
    lp.threshold = lf.filter->meta().threshold;
    eo.policy = lp;
    fc.filter.keep_ratio = evaluate(lf.model, &*lf.filter, resolve_split(c, true), eo).keep_ratio;
  }
  ran(run_stage(stages, dir, "finetune", config_sections_json(fc, {"finetune", "filter", "seed"}), {fs::path(ff.checkpoint), train_manifest},
                 {tuned, dir / "finetune_log.csv"}, [&] { cmd_finetune(fc, ff); }),
      "finetune");

  Flags ef;
  ef.checkpoint = tuned.string();
  ran(run_stage(stages, dir, "eval", config_sections_json(fc, {"filter", "bench", "seed"}), {tuned, val_manifest},
                 {dir / "eval.csv"}, [&] {
                   RunConfig ec = fc;
                   ec.bench.warmup = std::min<std::size_t>(ec.bench.warmup, 64);
                   cmd_eval(ec, ef);
                 }),
      "eval");
  if (mode == FilterMode::learned) {
    ran(run_stage(stages, dir, "stats", config_sections_json(c, {"filter"}), {records, tuned, val_manifest},
                   {dir / "dl_hist.csv", dir / "dl_patch_grid.csv", dir / "mask_avg_grid.csv"},
                   [&] {
                     Flags sf;
                     sf.checkpoint = tuned.string();
                     sf.records = records.string();
                     cmd_stats(c, sf);
                   }),
        "stats");
  }
  return 0;
}

ModelConfig deit_tiny() {
  ModelConfig m;
  m.image_size = 224;
  m.patch_size = 16;
  m.depth = 12;
  m.heads = 3;
  m.dim = 192;
  m.num_classes = 1000;
  return m;
}

int cmd_flops(const RunConfig& c, const Flags& f, bool deit) {
  const ModelConfig m = deit ? deit_tiny() : c.model;
  const FlopsReport full = count_flops(m, m.num_patches() + 1);
  std::printf("%s\n", flops_header().c_str());
  std::printf("config: image %zu patch %zu N %zu d %zu depth %zu heads %zu classes %zu\n", m.image_size, m.patch_size,
              m.num_patches(), m.dim, m.depth, m.heads, m.num_classes);
  std::printf("params %llu (+ filter %llu)\n", static_cast<unsigned long long>(params_count(m)),
              static_cast<unsigned long long>(filter_params_count(m.dim, c.filter.use_global)));
  const BlockMacs& b = full.per_block;
  std::printf("per block at S=%zu: qkv %llu scores %llu weighted_values %llu out_proj %llu mlp %llu\n", full.seq_len,
              static_cast<unsigned long long>(b.qkv), static_cast<unsigned long long>(b.scores),
              static_cast<unsigned long long>(b.weighted_values), static_cast<unsigned long long>(b.out_proj),
              static_cast<unsigned long long>(b.mlp));
  std::printf("total MACs %llu (embed %llu head %llu)\n", static_cast<unsigned long long>(full.total),
              static_cast<unsigned long long>(full.embed), static_cast<unsigned long long>(full.head));
  std::vector<double> ratios = f.ratios;
  if (ratios.empty()) ratios = {0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  const auto rows = sweep_keep_ratio(m, ratios);
  const fs::path path = out_path(c, "flops.csv");
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << "# " << flops_header() << "\nratio,seq_len,macs,speedup\n";
  std::printf("%8s %8s %14s %8s\n", "ratio", "S", "MACs", "speedup");
  for (const auto& r : rows) {
    std::printf("%8.3f %8zu %14llu %8.3f\n", r.ratio, r.seq_len, static_cast<unsigned long long>(r.macs), r.speedup);
    out << r.ratio << ',' << r.seq_len << ',' << r.macs << ',' << r.speedup << '\n';
  }
  return 0;
}

int cmd_compare(const RunConfig& c, const Flags& f, bool deit) {
  const ModelConfig m = deit ? deit_tiny() : c.model;
  const auto gradual = dynamic_vit_schedule(m.depth);
  const ScheduleComparison s = compare_schedules(m, f.one_pass, gradual);
  std::printf("%s\n", flops_header().c_str());
  std::printf("gradual schedule:");
  for (double g : gradual) std::printf(" %.3f", g);
  std::printf("\none-pass ratio %.3f: %llu MACs\ngradual: %llu MACs\nequivalent one-pass ratio %.4f\n", f.one_pass,
              static_cast<unsigned long long>(s.one_pass_macs), static_cast<unsigned long long>(s.gradual_macs),
              s.equivalent_one_pass_ratio);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Delta-loss token filtering for vision transformers"};
  app.require_subcommand(1);
  Flags f;
  bool deit = false;

  struct Cmd {
    const char* name;
    const char* help;
  };
  const std::vector<Cmd> cmds{
      {"gen-data", "Write the synthetic train/val datasets"},
      {"pretrain", "Train the backbone"},
      {"score-dl", "Delta-loss score every token of the training images"},
      {"label", "Threshold delta-loss records into keep labels"},
      {"train-filter", "Train the token filter on labelled records"},
      {"finetune", "Fine-tune backbone and filter end to end"},
      {"infer", "Predict with token dropping"},
      {"eval", "Accuracy, MACs and throughput on the validation split"},
      {"bench", "Throughput of all-keep against the configured filter"},
      {"stats", "dl histogram, per-patch dl and mask-average grids"},
      {"ablate", "Learned / random / random-init filters across rho and the global feature"},
      {"pipeline", "pretrain -> score-dl -> label -> train-filter -> finetune -> eval"},
      {"flops", "Analytic MACs and parameters, keep-ratio sweep"},
      {"compare-schedules", "One-pass filtering against a gradual schedule"},
  };
  std::map<std::string, CLI::App*> sub;
  for (const auto& c : cmds) {
    CLI::App* s = app.add_subcommand(c.name, c.help);
    add_common(s, f);
    sub[c.name] = s;
  }
  for (const char* n : {"pretrain", "finetune"}) {
    sub[n]->add_option("--epochs", f.epochs, "Training epochs");
    sub[n]->add_option("--optimizer", f.optimizer, "sgd or adamw")->check(CLI::IsMember({"sgd", "adamw"}));
  }
  for (const char* n : {"pretrain", "finetune", "eval", "bench"}) sub[n]->add_option("--batch", f.batch, "Batch size");
  for (const char* n : {"eval", "bench"}) sub[n]->add_option("--warmup", f.warmup, "Warm-up forwards before timing");
  for (const char* n : {"label", "train-filter", "stats"}) sub[n]->add_option("--records", f.records, "Delta-loss records CSV");
  for (const char* n : {"score-dl", "label"}) sub[n]->add_option("--out", f.out, "Output records CSV");
  sub["ablate"]->add_option("--rho-list", f.rho_list, "rho values to sweep")->delimiter(',');
  sub["gen-data"]->add_option("--per-class", f.per_class, "Images per class");
  sub["gen-data"]->add_option("--split", f.split, "train, val or both")->check(CLI::IsMember({"train", "val", "both"}));
  for (const char* n : {"flops", "compare-schedules"}) sub[n]->add_flag("--deit-t", deit, "Use the DeiT-Tiny shape");
  sub["flops"]->add_option("--ratios", f.ratios, "Keep ratios to sweep");
  sub["compare-schedules"]->add_option("--one-pass", f.one_pass, "One-pass keep ratio");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::config);
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const RunConfig c = build_config(f, command);
    write_run_header(c.out_dir, command, c);
    if (command == "gen-data") return cmd_gen_data(c, f);
    if (command == "pretrain") return cmd_pretrain(c);
    if (command == "score-dl") return cmd_score(c, f);
    if (command == "label") return cmd_label(c, f);
    if (command == "train-filter") return cmd_train_filter(c, f);
    if (command == "finetune") return cmd_finetune(c, f);
    if (command == "infer") return cmd_infer(c, f);
    if (command == "eval") return cmd_eval(c, f);
    if (command == "bench") return cmd_bench(c, f);
    if (command == "stats") return cmd_stats(c, f);
    if (command == "ablate") return cmd_ablate(c, f);
    if (command == "pipeline") return cmd_pipeline(c);
    if (command == "flops") return cmd_flops(c, f, deit);
    if (command == "compare-schedules") return cmd_compare(c, f, deit);
  } catch (const Error& e) {
    report_failure(command, e.what());
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    report_failure(command, e.what());
    return 1;
  }
  return 0;
}
