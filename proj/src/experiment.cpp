#include "dlvit/experiment.hpp"

#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dlvit/error.hpp"
#include "dlvit/parallel.hpp"

namespace dlvit {

using nlohmann::json;

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, image_size, patch_size, channels, depth, heads, dim,
                                                mlp_ratio, num_classes)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataSection, train, val, train_per_class, val_per_class, train_seed,
                                                val_seed, scale_min, scale_max, jitter, noise)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainSection, optimizer, epochs, lr, batch, warmup_epochs, cosine,
                                                weight_decay, momentum)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FinetuneSection, optimizer, epochs, lr, batch, momentum, weight_decay,
                                                decay_every, decay, filter_grad, mask_mode, mask_pre_pos)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ScoreSection, images, dl_sign, chunk)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FilterSection, mode, use_global, aap_includes_class, threshold,
                                                keep_ratio, lr, weight_decay, batch, max_epochs, patience, pos_weight,
                                                init_seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BenchSection, batch, warmup, repeats)

// rho is null until set
void to_json(json& j, const LabelSection& s) {
  j = json{{"rho", s.has_rho ? json(s.rho) : json(nullptr)}, {"label_ratio", s.label_ratio}, {"rho_list", s.rho_list}};
}
void from_json(const json& j, LabelSection& s) {
  if (j.contains("rho")) {
    s.has_rho = !j.at("rho").is_null();
    if (s.has_rho) s.rho = j.at("rho").get<double>();
  }
  if (j.contains("label_ratio")) s.label_ratio = j.at("label_ratio").get<double>();
  if (j.contains("rho_list")) s.rho_list = j.at("rho_list").get<std::vector<double>>();
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, model, data, pretrain, finetune, score, label, filter, bench,
                                                seed, threads, out_dir)

namespace {

void check_known(const json& user, const json& known, const std::string& where, const std::string& source) {
  if (!user.is_object()) return;
  for (const auto& [k, v] : user.items()) {
    const std::string path = where.empty() ? k : where + "." + k;
    if (!known.contains(k)) throw ConfigError(source + ": unknown key '" + path + "'");
    if (v.is_object()) check_known(v, known.at(k), path, source);
  }
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::size_t RunConfig::thread_count() const { return threads ? threads : default_threads(); }

void RunConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid config: " + what); };
  if (model.patch_size == 0 || model.image_size % model.patch_size != 0) fail("model.image_size must be a multiple of model.patch_size");
  if (model.heads == 0 || model.dim % model.heads != 0) fail("model.dim must be a multiple of model.heads");
  if (model.num_classes < 2) fail("model.num_classes must be at least 2");
  parse_optimizer(pretrain.optimizer);
  parse_optimizer(finetune.optimizer);
  parse_dl_sign(score.dl_sign);
  parse_filter_mode(filter.mode);
  if (finetune.mask_mode != "attn" && finetune.mask_mode != "zero-embed") fail("finetune.mask_mode must be attn or zero-embed");
  if (!(label.label_ratio > 0 && label.label_ratio < 1)) fail("label.label_ratio must lie in (0, 1)");
  if (label.has_rho && std::isnan(label.rho)) fail("label.rho is NaN");
  if (filter.keep_ratio < 0 || filter.keep_ratio > 1) fail("filter.keep_ratio must lie in [0, 1]");
  if (!(filter.threshold >= 0)) fail("filter.threshold must be non-negative");
  if (bench.batch == 0) fail("bench.batch must be positive");
  pretrain_schedule(*this).validate();
  finetune_schedule(*this).validate();
}

std::string config_to_json(const RunConfig& c, int indent) { return json(c).dump(indent); }

std::string config_sections_json(const RunConfig& c, const std::vector<std::string>& keys) {
  const json all = c;
  json out = json::object();
  for (const auto& k : keys) out[k] = all.at(k);
  return out.dump();
}

RunConfig merge_config_json(RunConfig base, const std::string& text, const std::string& source) {
  try {
    const json user = json::parse(text);
    if (!user.is_object()) throw ConfigError(source + ": expected a JSON object");
    json merged = base;
    check_known(user, merged, "", source);
    merged.merge_patch(user);
    return merged.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(source + ": " + e.what());
  }
}

RunConfig load_config_file(RunConfig base, const std::filesystem::path& path) {
  return merge_config_json(std::move(base), read_text(path), path.string());
}

void write_run_header(const std::filesystem::path& dir, const std::string& command, const RunConfig& c) {
  std::filesystem::create_directories(dir);
  const json h{{"version", kVersion},
               {"command", command},
               {"seed", c.seed},
               {"dl_sign", c.score.dl_sign},
               {"threads", c.thread_count()},
               {"mac_convention", "1 MAC = one multiply-add"},
               {"config", json(c)}};
  const auto path = dir / "run_header.json";
  std::ofstream out(path);
  out << h.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + path.string());
}

TrainSchedule pretrain_schedule(const RunConfig& c) {
  TrainSchedule s = TrainSchedule::pretrain_defaults();
  s.optimizer = parse_optimizer(c.pretrain.optimizer);
  s.epochs = c.pretrain.epochs;
  s.base_lr = c.pretrain.lr;
  s.batch = c.pretrain.batch;
  s.warmup_epochs = c.pretrain.warmup_epochs;
  s.cosine = c.pretrain.cosine;
  s.weight_decay = c.pretrain.weight_decay;
  s.momentum = c.pretrain.momentum;
  s.seed = c.seed;
  return s;
}

TrainSchedule finetune_schedule(const RunConfig& c) {
  TrainSchedule s = TrainSchedule::finetune_defaults();
  s.optimizer = parse_optimizer(c.finetune.optimizer);
  s.epochs = c.finetune.epochs;
  s.base_lr = c.finetune.lr;
  s.batch = c.finetune.batch;
  s.momentum = c.finetune.momentum;
  s.weight_decay = c.finetune.weight_decay;
  s.decay_every = c.finetune.decay_every;
  s.decay = c.finetune.decay;
  s.seed = c.seed;
  return s;
}

ForwardOptions forward_options(const RunConfig& c) {
  ForwardOptions f;
  f.mode = c.finetune.mask_mode == "zero-embed" ? MaskMode::zero_embed : MaskMode::attention;
  f.mask_pre_pos = c.finetune.mask_pre_pos;
  return f;
}

FinetuneOptions finetune_options(const RunConfig& c, const MaskPolicy& policy) {
  FinetuneOptions o;
  o.schedule = finetune_schedule(c);
  o.policy = policy;
  o.filter_grad = c.finetune.filter_grad;
  o.forward = forward_options(c);
  return o;
}

FilterTrainOptions filter_train_options(const RunConfig& c) {
  FilterTrainOptions o;
  o.lr = c.filter.lr;
  o.weight_decay = c.filter.weight_decay;
  o.batch = c.filter.batch;
  o.max_epochs = c.filter.max_epochs;
  o.patience = c.filter.patience;
  o.pos_weight = static_cast<float>(c.filter.pos_weight);
  o.seed = c.seed;
  return o;
}

FilterMeta filter_meta(const RunConfig& c, double rho) {
  FilterMeta m;
  m.use_global = c.filter.use_global;
  m.threshold = c.filter.threshold;
  m.sign = parse_dl_sign(c.score.dl_sign);
  m.rho = rho;
  m.aap_includes_class = c.filter.aap_includes_class;
  return m;
}

ScoreOptions score_options(const RunConfig& c) {
  ScoreOptions o;
  o.sign = parse_dl_sign(c.score.dl_sign);
  o.chunk = c.score.chunk;
  return o;
}

SyntheticSpec synthetic_spec(const RunConfig& c, bool validation) {
  SyntheticSpec s;
  s.image_size = c.model.image_size;
  s.patch_size = c.model.patch_size;
  s.channels = c.model.channels;
  s.num_classes = c.model.num_classes;
  s.scale_min = c.data.scale_min;
  s.scale_max = c.data.scale_max;
  s.jitter = c.data.jitter;
  s.noise = c.data.noise;
  s.seed = validation ? c.data.val_seed : c.data.train_seed;
  return s;
}

Dataset load_data_arg(const std::string& arg) {
  std::filesystem::path p(arg);
  if (std::filesystem::is_directory(p)) {
    std::vector<std::filesystem::path> csvs;
    for (const auto& e : std::filesystem::directory_iterator(p))
      if (e.path().extension() == ".csv") csvs.push_back(e.path());
    if (std::filesystem::exists(p / "manifest.csv")) p /= "manifest.csv";
    else if (csvs.size() == 1) p = csvs.front();
    else throw IoError(arg + ": expected manifest.csv or exactly one CSV manifest");
  }
  return load_dataset(read_manifest(p));
}

Dataset resolve_split(const RunConfig& c, bool validation) {
  const std::string& path = validation ? c.data.val : c.data.train;
  if (!path.empty()) return load_data_arg(path);
  return generate_synthetic(synthetic_spec(c, validation), validation ? c.data.val_per_class : c.data.train_per_class);
}

Dataset head(const Dataset& d, std::size_t n) {
  Dataset out = d;
  if (n != 0 && n < out.samples.size()) out.samples.resize(n);
  return out;
}

double choose_rho(const RunConfig& c, std::span<const DeltaLossRecord> records) {
  return c.label.has_rho ? c.label.rho : rho_for_label_ratio(records, c.label.label_ratio);
}

Dataset select_scored(const Dataset& d, std::span<const DeltaLossRecord> records) {
  std::set<std::string> ids;
  for (const auto& r : records) ids.insert(r.image_id);
  Dataset out = d;
  out.samples.clear();
  for (const auto& s : d.samples)
    if (ids.count(s.id)) out.samples.push_back(s);
  return out;
}

MaskPolicy mask_policy(const RunConfig& c, FilterMode mode, double keep_ratio) {
  MaskPolicy p;
  p.mode = mode;
  p.threshold = c.filter.threshold;
  p.keep_ratio = keep_ratio;
  p.seed = c.seed;
  return p;
}

FilterStage run_filter_stage(const RunConfig& c, const VitModel& backbone, const Dataset& scored,
                             std::vector<DeltaLossRecord>& records) {
  FilterStage st;
  st.rho = choose_rho(c, records);
  apply_labels(records, st.rho);
  const FilterMeta meta = filter_meta(c, st.rho);
  const FilterCorpus corpus = build_corpus(backbone, scored, records, meta, c.thread_count());
  st.positives = corpus.positives();
  st.labelled = corpus.labels.size();
  st.filter = train_filter(corpus, FilterMLP::init(backbone.config().dim, meta, c.filter.init_seed),
                           filter_train_options(c), &st.report);
  return st;
}

Arm finetune_arm(const RunConfig& c, const VitModel& backbone, const FilterMLP& filter, const Dataset& train,
                 const Dataset& val, const MaskPolicy& policy, const EpochCallback& on_epoch) {
  Arm a;
  a.tuned = finetune(backbone, filter, train, finetune_options(c, policy), on_epoch);
  EvalOptions eo;
  eo.policy = policy;
  eo.measure_throughput = false;
  eo.threads = c.thread_count();
  a.report = evaluate(a.tuned.model, policy.uses_filter() ? &a.tuned.filter : nullptr, val, eo);
  return a;
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_file(const std::filesystem::path& path) { return fnv1a64(read_text(path)); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

bool StageRunner::run(const std::string& name, const std::string& config_text,
                      const std::vector<std::filesystem::path>& inputs,
                      const std::vector<std::filesystem::path>& outputs, const std::function<void()>& body) {
  std::uint64_t h = fnv1a64(name);
  h = fnv1a64(config_text, h);
  for (const auto& in : inputs) {
    const std::string part = in.filename().string() + ":" + hex64(hash_file(in)) + ";";
    h = fnv1a64(part, h);
  }
  const std::string key = hex64(h);
  const auto path = marker(name);
  bool fresh = std::filesystem::exists(path);
  for (const auto& out : outputs) fresh = fresh && std::filesystem::exists(out);
  if (fresh) {
    std::ifstream in(path);
    std::string stored;
    std::getline(in, stored);
    if (stored == key) return false;
  }
  std::filesystem::remove(path);
  body();
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out << key << '\n';
  for (const auto& o : outputs) out << o.filename().string() << ' ' << hex64(hash_file(o)) << '\n';
  if (!out) throw IoError("cannot write stage marker " + path.string());
  return true;
}

SpatialGrid mask_average_grid(const VitModel& model, const FilterMLP* filter, const Dataset& data,
                              const MaskPolicy& policy, std::size_t threads) {
  const std::size_t n = model.config().num_patches();
  std::vector<std::vector<std::uint8_t>> bits(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i, std::size_t) {
    const auto preds = infer_masked(model, filter, std::span(data.samples).subspan(i, 1), policy, i);
    const auto b = preds[0].mask.bits();
    bits[i].assign(b.begin(), b.end());
  });
  std::vector<std::size_t> index;
  std::vector<double> value;
  index.reserve(data.size() * n);
  value.reserve(data.size() * n);
  for (const auto& b : bits)
    for (std::size_t t = 0; t < n; ++t) {
      index.push_back(t);
      value.push_back(b[t]);
    }
  return spatial_grid(index, value, model.config().grid_side());
}

RelevanceSplit keep_probability_by_relevance(const VitModel& model, const FilterMLP& filter, const Dataset& data,
                                             std::size_t threads) {
  const std::size_t n = model.config().num_patches();
  std::vector<std::vector<float>> probs(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i, std::size_t) {
    probs[i] = filter.predict_proba(model.embed(data.samples[i].pixels));
  });
  RelevanceSplit r;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& rel = data.samples[i].relevance;
    if (rel.size() != n) throw ContractError("relevance grid missing for " + data.samples[i].id);
    for (std::size_t t = 0; t < n; ++t) {
      if (rel[t]) {
        r.object += probs[i][t];
        ++r.object_count;
      } else {
        r.background += probs[i][t];
        ++r.background_count;
      }
    }
  }
  if (r.object_count) r.object /= static_cast<double>(r.object_count);
  if (r.background_count) r.background /= static_cast<double>(r.background_count);
  return r;
}

DlStatistics write_dl_statistics(const std::filesystem::path& dir, std::span<const DeltaLossRecord> records,
                                 std::size_t grid_side) {
  std::filesystem::create_directories(dir);
  const DlStatistics s = dl_statistics(records, grid_side);
  write_histogram_csv(dir / "dl_hist.csv", s.histogram);
  write_grid_csv(dir / "dl_patch_grid.csv", s.grid);
  return s;
}

}  // namespace dlvit
