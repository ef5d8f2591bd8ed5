#include "dlvit/filter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "dlvit/error.hpp"
#include "dlvit/optim.hpp"
#include "dlvit/parallel.hpp"
#include "dlvit/rng.hpp"

namespace dlvit {

namespace {
constexpr std::size_t kHidden2 = 100;
}

Tensor global_feature(const TokenMatrix& tokens, bool include_class, Tape* tape) {
  if (tokens.size() == 0) throw ContractError("global_feature: no tokens");
  if (!include_class) return mean_rows(tokens.patch_tokens, tape);
  return mean_rows(concat_rows({tokens.class_token, tokens.patch_tokens}, tape), tape);
}

Tensor build_descriptors(const TokenMatrix& tokens, bool use_global, bool include_class, Tape* tape) {
  if (!use_global) return tokens.patch_tokens;
  return concat_cols_broadcast(tokens.patch_tokens, global_feature(tokens, include_class, tape), tape);
}

std::size_t floor_keep_count(std::size_t n) { return std::max<std::size_t>(1, (n * 5 + 99) / 100); }

KeepMask top_k_mask(std::span<const float> p, std::size_t k) {
  const std::size_t n = p.size();
  k = std::min(k, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  std::vector<std::uint8_t> keep(n, 0);
  for (std::size_t j = 0; j < k; ++j) keep[order[j]] = 1;
  return KeepMask(std::move(keep));
}

KeepMask mask_from_probabilities(std::span<const float> p, float threshold) {
  std::vector<std::uint8_t> keep(p.size());
  bool any = false;
  for (std::size_t i = 0; i < p.size(); ++i) {
    keep[i] = p[i] >= threshold ? 1 : 0;
    any = any || keep[i];
  }
  if (!any) return top_k_mask(p, floor_keep_count(p.size()));
  return KeepMask(std::move(keep));
}

// ---- FilterMLP ------------------------------------------------------------

namespace {

Tensor uniform_tensor(Shape shape, double bound, SplitMix64& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace

FilterMLP FilterMLP::init(std::size_t dim, const FilterMeta& meta, std::uint64_t seed) {
  if (dim == 0) throw ConfigError("filter: dim must be positive");
  FilterMLP f;
  f.meta_ = meta;
  const std::size_t in = meta.use_global ? 2 * dim : dim, h1 = 2 * dim;
  SplitMix64 rng(seed);
  auto layer = [&](std::size_t fan_in, std::size_t fan_out, Tensor& w, Tensor& b) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    w = uniform_tensor({fan_in, fan_out}, bound, rng);
    b = uniform_tensor({fan_out}, bound, rng);
  };
  layer(in, h1, f.l1_w_, f.l1_b_);
  layer(h1, kHidden2, f.l2_w_, f.l2_b_);
  layer(kHidden2, 1, f.l3_w_, f.l3_b_);
  return f;
}

bool FilterMLP::present_in(const std::map<std::string, Tensor>& tensors) { return tensors.count("filter.l1.w") != 0; }

FilterMLP FilterMLP::from_tensors(const std::map<std::string, Tensor>& tensors) {
  auto get = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("checkpoint has no '" + name + "' tensor");
    Tensor t = it->second.detach();
    t.set_requires_grad(true);
    return t;
  };
  FilterMLP f;
  f.l1_w_ = get("filter.l1.w");
  f.l1_b_ = get("filter.l1.b");
  f.l2_w_ = get("filter.l2.w");
  f.l2_b_ = get("filter.l2.b");
  f.l3_w_ = get("filter.l3.w");
  f.l3_b_ = get("filter.l3.b");
  f.meta_ = decode_filter_meta(get("filter.meta"));
  const bool ok = f.l1_w_.rank() == 2 && f.l2_w_.rank() == 2 && f.l3_w_.rank() == 2 &&
                  f.l1_w_.dim(1) == f.l2_w_.dim(0) && f.l2_w_.dim(1) == f.l3_w_.dim(0) && f.l3_w_.dim(1) == 1 &&
                  f.l1_b_.numel() == f.l1_w_.dim(1) && f.l2_b_.numel() == f.l2_w_.dim(1) && f.l3_b_.numel() == 1;
  if (!ok) throw ConfigError("filter tensors have inconsistent shapes");
  return f;
}

std::vector<std::size_t> FilterMLP::widths() const {
  return {l1_w_.dim(0), l1_w_.dim(1), l2_w_.dim(1), l3_w_.dim(1)};
}

NamedTensors FilterMLP::named_parameters() const {
  return {{"filter.l1.w", l1_w_}, {"filter.l1.b", l1_b_}, {"filter.l2.w", l2_w_},
          {"filter.l2.b", l2_b_}, {"filter.l3.w", l3_w_}, {"filter.l3.b", l3_b_}};
}

std::vector<Tensor> FilterMLP::parameters() const {
  std::vector<Tensor> out;
  for (auto& [_, t] : named_parameters()) out.push_back(t);
  return out;
}

NamedTensors FilterMLP::state() const {
  NamedTensors s = named_parameters();
  s.emplace_back("filter.meta", encode_filter_meta(meta_));
  return s;
}

Tensor FilterMLP::logits(const Tensor& desc, Tape* tape) const {
  if (desc.cols() != input_width()) {
    throw DimensionError("filter: descriptor width " + std::to_string(desc.cols()) + " != input width " +
                         std::to_string(input_width()));
  }
  Tensor h = relu(add_bias(matmul(desc, l1_w_, tape), l1_b_, tape), tape);
  h = relu(add_bias(matmul(h, l2_w_, tape), l2_b_, tape), tape);
  return add_bias(matmul(h, l3_w_, tape), l3_b_, tape);
}

Tensor FilterMLP::probabilities(const TokenMatrix& tokens, Tape* tape) const {
  return sigmoid(logits(build_descriptors(tokens, meta_.use_global, meta_.aap_includes_class, tape), tape), tape);
}

std::vector<float> FilterMLP::predict_proba(const TokenMatrix& tokens) const {
  const Tensor p = probabilities(tokens);
  return {p.data().begin(), p.data().end()};
}

KeepMask FilterMLP::predict_mask(const TokenMatrix& tokens, std::optional<float> threshold) const {
  return mask_from_probabilities(predict_proba(tokens), threshold.value_or(meta_.threshold));
}

void FilterMLP::zero_last_layer() {
  std::fill(l3_w_.data().begin(), l3_w_.data().end(), 0.0f);
  std::fill(l3_b_.data().begin(), l3_b_.data().end(), 0.0f);
}

Tensor encode_filter_meta(const FilterMeta& m) {
  return Tensor::from({5}, {m.use_global ? 1.0f : 0.0f, m.threshold, m.sign == DlSign::importance ? 0.0f : 1.0f,
                            static_cast<float>(m.rho), m.aap_includes_class ? 1.0f : 0.0f});
}

FilterMeta decode_filter_meta(const Tensor& record) {
  if (record.numel() < 4) throw ConfigError("filter.meta record is too short");
  auto v = record.data();
  FilterMeta m;
  m.use_global = v[0] != 0.0f;
  m.threshold = v[1];
  m.sign = v[2] == 0.0f ? DlSign::importance : DlSign::eq7_literal;
  m.rho = v[3];
  m.aap_includes_class = record.numel() > 4 && v[4] != 0.0f;
  return m;
}

// ---- corpus and training --------------------------------------------------

std::size_t FilterCorpus::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1.0f));
}

FilterCorpus build_corpus(const VitModel& model, const Dataset& data, std::span<const DeltaLossRecord> records,
                          const FilterMeta& meta, std::size_t threads) {
  const std::size_t n = model.config().num_patches();
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < data.size(); ++i) by_id[data.samples[i].id] = i;
  // labels per sample, -1 = missing
  std::vector<std::vector<int>> labels(data.size(), std::vector<int>(n, -1));
  std::vector<std::uint8_t> used(data.size(), 0);
  for (const auto& r : records) {
    if (r.label < 0) throw ContractError("build_corpus: record for " + r.image_id + " is not labelled");
    auto it = by_id.find(r.image_id);
    if (it == by_id.end()) throw ContractError("build_corpus: no sample with id " + r.image_id);
    if (r.token_index >= n) throw IndexError("build_corpus: token index out of range for " + r.image_id);
    labels[it->second][r.token_index] = r.label;
    used[it->second] = 1;
  }
  std::vector<std::size_t> images;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!used[i]) continue;
    if (std::count(labels[i].begin(), labels[i].end(), -1) != 0) {
      throw ContractError("build_corpus: image " + data.samples[i].id + " has unlabelled tokens");
    }
    images.push_back(i);
  }
  std::vector<Tensor> desc(images.size());
  parallel_for(images.size(), threads, [&](std::size_t j, std::size_t) {
    const Sample& s = data.samples[images[j]];
    desc[j] = build_descriptors(model.embed(s.pixels, s.id), meta.use_global, meta.aap_includes_class);
  });
  FilterCorpus c;
  c.descriptors = desc.empty() ? Tensor::zeros({0, meta.use_global ? 2 * model.config().dim : model.config().dim})
                               : concat_rows(desc);
  for (std::size_t i : images)
    for (std::size_t t = 0; t < n; ++t) {
      c.labels.push_back(static_cast<float>(labels[i][t]));
      c.token_index.push_back(t);
    }
  return c;
}

FilterMLP train_filter(const FilterCorpus& corpus, FilterMLP filter, const FilterTrainOptions& opts,
                       FilterTrainReport* report) {
  const std::size_t m = corpus.labels.size();
  const std::size_t pos = corpus.positives();
  if (m == 0 || pos == 0 || pos == m) {
    throw TrainingError("train_filter: pseudo-labels contain a single class (" + std::to_string(pos) + " of " +
                        std::to_string(m) + " positive); adjust rho");
  }
  if (opts.batch == 0) throw ConfigError("train_filter: batch must be positive");
  Sgd sgd(filter.parameters(), 0.0, opts.weight_decay);
  SplitMix64 rng(opts.seed);
  FilterTrainReport rep;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < opts.max_epochs; ++epoch) {
    const auto order = shuffled_order(m, rng());
    double total = 0;
    for (std::size_t start = 0; start < m; start += opts.batch) {
      const std::size_t count = std::min(opts.batch, m - start);
      std::span<const std::size_t> idx(order.data() + start, count);
      const Tensor x = gather_rows(corpus.descriptors, idx);
      std::vector<float> y(count);
      for (std::size_t j = 0; j < count; ++j) y[j] = corpus.labels[idx[j]];
      Tape tape;
      const Tensor loss = bce_with_logits(filter.logits(x, &tape), y, opts.pos_weight, &tape);
      if (!std::isfinite(loss.item())) throw DivergenceError("train_filter: loss became non-finite");
      tape.backward(loss);
      sgd.step(opts.lr);
      total += static_cast<double>(loss.item()) * static_cast<double>(count);
    }
    const double mean = total / static_cast<double>(m);
    rep.epoch_loss.push_back(mean);
    rep.epochs = epoch + 1;
    if (mean < best - opts.min_delta) {
      best = mean;
      stale = 0;
    } else if (++stale >= opts.patience) {
      rep.early_stopped = true;
      break;
    }
  }
  rep.train_accuracy = filter_accuracy(filter, corpus);
  if (report) *report = std::move(rep);
  return filter;
}

double filter_accuracy(const FilterMLP& filter, const FilterCorpus& corpus, float threshold) {
  if (corpus.labels.empty()) return 0.0;
  const Tensor p = sigmoid(filter.logits(corpus.descriptors));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < corpus.labels.size(); ++i) hit += ((p.data()[i] >= threshold) == (corpus.labels[i] > 0.5f));
  return static_cast<double>(hit) / static_cast<double>(corpus.labels.size());
}

}  // namespace dlvit
