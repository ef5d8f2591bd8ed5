#include "dlvit/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "dlvit/error.hpp"
#include "dlvit/optim.hpp"
#include "dlvit/parallel.hpp"

namespace dlvit {

const char* filter_mode_name(FilterMode m) {
  switch (m) {
    case FilterMode::learned: return "learned";
    case FilterMode::random_discard: return "random";
    case FilterMode::all_keep: return "all-keep";
    case FilterMode::random_init: return "random-init";
  }
  return "?";
}

FilterMode parse_filter_mode(const std::string& s) {
  if (s == "learned") return FilterMode::learned;
  if (s == "random") return FilterMode::random_discard;
  if (s == "all-keep") return FilterMode::all_keep;
  if (s == "random-init") return FilterMode::random_init;
  throw ConfigError("unknown filter mode '" + s + "' (expected learned, random, all-keep or random-init)");
}

const char* optimizer_name(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adamw"; }

Optimizer parse_optimizer(const std::string& s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "adamw") return Optimizer::adamw;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adamw)");
}

double TrainSchedule::lr(double epoch) const {
  double f = 1.0;
  if (cosine) {
    f = 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, epoch / static_cast<double>(std::max<std::size_t>(1, epochs)))));
  } else {
    f = std::pow(decay, std::floor(epoch / static_cast<double>(decay_every)));
  }
  if (epoch < warmup_epochs) f *= epoch / warmup_epochs;
  return base_lr * f;
}

void TrainSchedule::validate() const {
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("schedule: learning rate must be positive");
  if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("schedule: decay must lie in (0, 1]");
  if (decay_every == 0) throw ConfigError("schedule: decay_every must be positive");
  if (batch == 0) throw ConfigError("schedule: batch must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("schedule: momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("schedule: weight decay must be non-negative");
  if (!(warmup_epochs >= 0.0)) throw ConfigError("schedule: warmup must be non-negative");
}

TrainSchedule TrainSchedule::pretrain_defaults() {
  TrainSchedule s;
  s.optimizer = Optimizer::adamw;
  s.base_lr = 1e-3;
  s.batch = 16;
  s.cosine = true;
  s.warmup_epochs = 3;
  return s;
}

TrainSchedule TrainSchedule::finetune_defaults() {
  TrainSchedule s;
  s.optimizer = Optimizer::sgd;
  s.epochs = 20;
  s.base_lr = 1e-3;
  return s;
}

std::size_t matched_keep_count(double ratio, std::size_t n) {
  const auto k = static_cast<long long>(std::llround(ratio * static_cast<double>(n)));
  return static_cast<std::size_t>(std::clamp<long long>(k, 1, static_cast<long long>(n)));
}

KeepMask random_keep_mask(std::size_t n, std::size_t k, SplitMix64& rng) {
  const auto order = shuffled_order(n, rng());
  std::vector<std::uint8_t> keep(n, 0);
  for (std::size_t j = 0; j < std::min(k, n); ++j) keep[order[j]] = 1;
  return KeepMask(std::move(keep));
}

KeepMask choose_mask(const MaskPolicy& policy, std::span<const float> p, std::size_t n, SplitMix64& rng) {
  switch (policy.mode) {
    case FilterMode::all_keep: return KeepMask::all(n);
    case FilterMode::random_discard: return random_keep_mask(n, matched_keep_count(policy.keep_ratio, n), rng);
    case FilterMode::learned: return mask_from_probabilities(p, policy.threshold);
    case FilterMode::random_init: return top_k_mask(p, matched_keep_count(policy.keep_ratio, n));
  }
  return KeepMask::all(n);
}

SplitMix64 image_rng(std::uint64_t seed, std::size_t index) {
  SplitMix64 base(seed);
  return base.fork(index + 1);
}

// ---- training -------------------------------------------------------------

namespace {

std::string config_echo(const ModelConfig& c, const TrainSchedule& s) {
  std::ostringstream o;
  o << "seed=" << s.seed << " lr=" << s.base_lr << " batch=" << s.batch << " image=" << c.image_size
    << " patch=" << c.patch_size << " dim=" << c.dim << " depth=" << c.depth << " heads=" << c.heads;
  return o.str();
}

std::vector<EpochLog> train_loop(VitModel& model, FilterMLP* filter, const Dataset& data, const TrainSchedule& s,
                                 const MaskPolicy& policy, bool filter_grad, const ForwardOptions& fwd,
                                 const EpochCallback& on_epoch) {
  s.validate();
  data.check_compatible(model.config());
  const bool use_filter = policy.uses_filter();
  if (use_filter && (!filter || !filter->defined())) throw ContractError("training: filter mode needs a filter");
  const bool train_filter = use_filter && filter_grad;
  std::vector<Tensor> params = model.parameters();
  if (train_filter) {
    auto fp = filter->parameters();
    params.insert(params.end(), fp.begin(), fp.end());
  }
  Sgd sgd;
  AdamW adam;
  if (s.optimizer == Optimizer::sgd) {
    sgd = Sgd(params, s.momentum, s.weight_decay);
  } else {
    adam = AdamW(params, s.weight_decay);
  }
  const std::size_t n = model.config().num_patches();
  SplitMix64 rng(s.seed ^ 0x5DEECE66DULL);
  std::vector<EpochLog> log;
  for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
    const double lr = s.lr(static_cast<double>(epoch));
    const auto order = shuffled_order(data.size(), rng());
    double loss_sum = 0, kept_sum = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += s.batch) {
      const std::size_t count = std::min(s.batch, order.size() - start);
      Tape tape;
      std::vector<TokenMatrix> tokens;
      std::vector<KeepMask> masks;
      std::vector<Tensor> gates;
      std::vector<int> labels;
      tokens.reserve(count);
      for (std::size_t j = 0; j < count; ++j) {
        const Sample& smp = data.samples[order[start + j]];
        labels.push_back(smp.label);
        tokens.push_back(model.embed(smp.pixels, smp.id, &tape));
        if (policy.mode == FilterMode::all_keep) continue;
        if (!use_filter) {
          masks.push_back(choose_mask(policy, {}, n, rng));
          continue;
        }
        const Tensor p = filter->probabilities(tokens.back(), train_filter ? &tape : nullptr);
        KeepMask m = choose_mask(policy, p.data(), n, rng);
        if (train_filter) {
          std::vector<float> hard(n);
          for (std::size_t i = 0; i < n; ++i) hard[i] = m.kept(i) ? 1.0f : 0.0f;
          gates.push_back(straight_through(hard, p, &tape));
        }
        masks.push_back(std::move(m));
      }
      for (const auto& m : masks) kept_sum += static_cast<double>(m.kept_count());
      if (masks.empty()) kept_sum += static_cast<double>(n * count);
      const Tensor logits = model.forward_batch(tokens, masks, &tape, fwd, gates);
      const Tensor loss = cross_entropy(logits, labels, &tape);
      if (!std::isfinite(loss.item())) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + " (" +
                              config_echo(model.config(), s) + ")");
      }
      tape.backward(loss);
      // lr at the midpoint of the step
      const double step_lr =
          s.lr(static_cast<double>(epoch) + (static_cast<double>(start) + 0.5 * static_cast<double>(count)) /
                                                static_cast<double>(order.size()));
      if (s.optimizer == Optimizer::sgd) {
        sgd.step(step_lr);
      } else {
        adam.step(step_lr);
      }
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(count);
      const std::size_t c = logits.cols();
      for (std::size_t j = 0; j < count; ++j) {
        const float* row = logits.data().data() + j * c;
        correct += static_cast<std::size_t>(std::max_element(row, row + c) - row) == static_cast<std::size_t>(labels[j]);
      }
    }
    EpochLog e;
    e.epoch = epoch;
    e.lr = lr;
    const double m = static_cast<double>(std::max<std::size_t>(1, data.size()));
    e.loss = loss_sum / m;
    e.accuracy = static_cast<double>(correct) / m;
    e.keep_ratio = kept_sum / (m * static_cast<double>(n));
    log.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return log;
}

}  // namespace

VitModel pretrain(const ModelConfig& config, const Dataset& data, const TrainSchedule& schedule,
                  std::vector<EpochLog>* log, const EpochCallback& on_epoch) {
  config.validate();
  std::set<int> classes;
  for (const auto& s : data.samples) classes.insert(s.label);
  if (classes.size() < 2) throw TrainingError("pretrain: dataset needs at least two classes");
  VitModel model = VitModel::init(config, schedule.seed);
  MaskPolicy keep_all;
  keep_all.mode = FilterMode::all_keep;
  auto l = train_loop(model, nullptr, data, schedule, keep_all, false, {}, on_epoch);
  if (log) *log = std::move(l);
  return model;
}

FinetuneResult finetune(const VitModel& backbone, const FilterMLP& filter, const Dataset& data,
                        const FinetuneOptions& opts, const EpochCallback& on_epoch) {
  FinetuneResult r;
  r.model = backbone.clone();
  if (filter.defined()) {
    std::map<std::string, Tensor> m;
    for (auto& [k, v] : filter.state()) m[k] = v;
    r.filter = FilterMLP::from_tensors(m);
  }
  r.log = train_loop(r.model, r.filter.defined() ? &r.filter : nullptr, data, opts.schedule, opts.policy,
                     opts.filter_grad, opts.forward, on_epoch);
  return r;
}

// ---- inference ------------------------------------------------------------

namespace {

struct Prepared {
  std::vector<TokenMatrix> tokens;
  std::vector<KeepMask> masks;
};

Prepared prepare(const VitModel& model, const FilterMLP* filter, std::span<const Sample> samples,
                 const MaskPolicy& policy, std::size_t first_index) {
  if (policy.uses_filter() && (!filter || !filter->defined())) {
    throw ContractError(std::string("filter mode ") + filter_mode_name(policy.mode) + " needs a trained filter");
  }
  const std::size_t n = model.config().num_patches();
  Prepared p;
  p.tokens.reserve(samples.size());
  p.masks.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    p.tokens.push_back(model.embed(samples[i].pixels, samples[i].id));
    SplitMix64 rng = image_rng(policy.seed, first_index + i);
    if (policy.uses_filter()) {
      p.masks.push_back(choose_mask(policy, filter->predict_proba(p.tokens.back()), n, rng));
    } else {
      p.masks.push_back(choose_mask(policy, {}, n, rng));
    }
  }
  return p;
}

Prediction make_prediction(const Tensor& logits, std::size_t row, const std::string& id, KeepMask mask) {
  const std::size_t c = logits.cols();
  const float* r = logits.data().data() + row * c;
  Prediction p;
  p.image_id = id;
  p.logits.assign(r, r + c);
  p.predicted = static_cast<int>(std::max_element(r, r + c) - r);
  p.mask = std::move(mask);
  return p;
}

}  // namespace

std::vector<Prediction> infer(const VitModel& model, const FilterMLP* filter, std::span<const Sample> samples,
                              const MaskPolicy& policy, std::size_t first_index) {
  Prepared p = prepare(model, filter, samples, policy, first_index);
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < samples.size(); ++i) groups[p.masks[i].kept_count()].push_back(i);
  std::vector<Prediction> out(samples.size());
  for (const auto& [kept, members] : groups) {
    std::vector<TokenMatrix> t;
    std::vector<KeepMask> m;
    for (std::size_t i : members) {
      t.push_back(p.tokens[i]);
      m.push_back(p.masks[i]);
    }
    const Tensor logits = model.forward_reduced(t, m);
    for (std::size_t j = 0; j < members.size(); ++j) {
      const std::size_t i = members[j];
      out[i] = make_prediction(logits, j, samples[i].id, std::move(p.masks[i]));
    }
  }
  return out;
}

std::vector<Prediction> infer_masked(const VitModel& model, const FilterMLP* filter, std::span<const Sample> samples,
                                     const MaskPolicy& policy, std::size_t first_index, const ForwardOptions& forward) {
  Prepared p = prepare(model, filter, samples, policy, first_index);
  std::vector<Prediction> out(samples.size());
  if (samples.empty()) return out;
  const Tensor logits = model.forward_batch(p.tokens, p.masks, nullptr, forward);
  for (std::size_t i = 0; i < samples.size(); ++i) out[i] = make_prediction(logits, i, samples[i].id, p.masks[i]);
  return out;
}

void warm_up(const VitModel& model, const FilterMLP* filter, std::span<const Sample> samples,
             const MaskPolicy& policy, std::size_t forwards, std::size_t batch) {
  if (samples.empty() || forwards == 0) return;
  batch = std::max<std::size_t>(1, batch);
  std::size_t done = 0, pos = 0;
  while (done < forwards) {
    const std::size_t count = std::min({batch, forwards - done, samples.size() - pos});
    infer(model, filter, samples.subspan(pos, count), policy, pos);
    done += count;
    pos = (pos + count) % samples.size();
  }
}

double timed_inference_pass(const VitModel& model, const FilterMLP* filter, std::span<const Sample> samples,
                            const MaskPolicy& policy, std::size_t batch, std::size_t threads) {
  batch = std::max<std::size_t>(1, batch);
  const std::size_t batches = (samples.size() + batch - 1) / batch;
  const auto t0 = std::chrono::steady_clock::now();
  parallel_for(batches, threads, [&](std::size_t b, std::size_t) {
    const std::size_t start = b * batch;
    infer(model, filter, samples.subspan(start, std::min(batch, samples.size() - start)), policy, start);
  });
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

EvalReport evaluate(const VitModel& model, const FilterMLP* filter, const Dataset& data, const EvalOptions& opts) {
  data.check_compatible(model.config());
  const ModelConfig& cfg = model.config();
  const std::size_t n = cfg.num_patches();
  const std::size_t batch = std::max<std::size_t>(1, opts.batch);
  const std::span<const Sample> all(data.samples);
  const std::size_t batches = (all.size() + batch - 1) / batch;
  std::vector<Prediction> preds(all.size());
  parallel_for(batches, opts.threads, [&](std::size_t b, std::size_t) {
    const std::size_t start = b * batch;
    const auto part = all.subspan(start, std::min(batch, all.size() - start));
    auto out = opts.drop ? infer(model, filter, part, opts.policy, start)
                         : infer_masked(model, filter, part, opts.policy, start);
    std::move(out.begin(), out.end(), preds.begin() + static_cast<std::ptrdiff_t>(start));
  });

  EvalReport r;
  r.images = all.size();
  r.threads = opts.threads;
  r.batch = batch;
  std::size_t top1 = 0, top5 = 0;
  double kept = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const Prediction& p = preds[i];
    const int y = all[i].label;
    top1 += p.predicted == y;
    const float ly = p.logits.at(static_cast<std::size_t>(y));
    std::size_t above = 0;
    for (std::size_t k = 0; k < p.logits.size(); ++k)
      above += p.logits[k] > ly || (p.logits[k] == ly && static_cast<int>(k) < y);
    top5 += above < 5;
    r.kept_counts.push_back(p.mask.kept_count());
    r.predictions.push_back(p.predicted);
    kept += static_cast<double>(p.mask.kept_count());
  }
  const double m = static_cast<double>(std::max<std::size_t>(1, all.size()));
  r.top1 = static_cast<double>(top1) / m;
  r.top5 = static_cast<double>(top5) / m;
  const double mean_kept = all.empty() ? static_cast<double>(n) : kept / m;
  r.keep_ratio = mean_kept / static_cast<double>(n);
  FilterShape fs;
  fs.present = opts.policy.uses_filter();
  fs.use_global = filter && filter->defined() ? filter->meta().use_global : true;
  r.macs_full = count_flops(cfg, n + 1, fs).total;
  r.macs_filtered = static_cast<std::uint64_t>(std::llround(macs_at(cfg, mean_kept + 1.0, fs)));
  r.params = params_count(cfg, fs);
  if (opts.measure_throughput && !all.empty()) {
    warm_up(model, filter, all, opts.policy, opts.warmup, batch);
    r.throughput = static_cast<double>(all.size()) /
                   timed_inference_pass(model, filter, all, opts.policy, batch, opts.threads);
  }
  return r;
}

std::string format_report(const EvalReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "images        %zu\n"
                "top-1         %.2f%%\n"
                "top-5         %.2f%%\n"
                "keep ratio    %.4f\n"
                "MACs full     %.4g\n"
                "MACs filtered %.4g\n"
                "params        %llu\n"
                "throughput    %.1f images/s (threads %zu, batch %zu)\n",
                r.images, 100.0 * r.top1, 100.0 * r.top5, r.keep_ratio, static_cast<double>(r.macs_full),
                static_cast<double>(r.macs_filtered), static_cast<unsigned long long>(r.params), r.throughput,
                r.threads, r.batch);
  return buf;
}

void write_reports_csv(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "name,top1,top5,keep_ratio,macs_full,macs_filtered,params,throughput,threads,batch\n";
  char buf[64];
  for (const auto& [name, r] : rows) {
    out << name;
    for (double v : {r.top1, r.top5, r.keep_ratio}) {
      std::snprintf(buf, sizeof buf, ",%.6f", v);
      out << buf;
    }
    out << ',' << r.macs_full << ',' << r.macs_filtered << ',' << r.params;
    std::snprintf(buf, sizeof buf, ",%.2f", r.throughput);
    out << buf << ',' << r.threads << ',' << r.batch << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::map<std::string, Tensor> checkpoint_tensors(const VitModel& model, const FilterMLP* filter) {
  std::map<std::string, Tensor> m;
  for (auto& [k, v] : model.state()) m[k] = v;
  if (filter && filter->defined())
    for (auto& [k, v] : filter->state()) m[k] = v;
  return m;
}

}  // namespace dlvit
