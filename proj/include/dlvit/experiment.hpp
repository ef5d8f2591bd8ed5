#pragma once

// Run configuration, run headers and content-hashed stage markers shared by
// the CLI and the acceptance harness, plus the filter analyses behind the
// spatial statistics.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dlvit/bench.hpp"
#include "dlvit/dataset.hpp"
#include "dlvit/filter.hpp"
#include "dlvit/pipeline.hpp"
#include "dlvit/scorer.hpp"
#include "dlvit/stats.hpp"

namespace dlvit {

inline constexpr const char* kVersion = "0.1.0";

struct DataSection {
  std::string train;  // manifest CSV or its directory; empty: synthetic
  std::string val;
  std::size_t train_per_class = 200;
  std::size_t val_per_class = 50;
  std::uint64_t train_seed = 1;
  std::uint64_t val_seed = 2;
  double scale_min = 6.0;
  double scale_max = 10.0;
  double jitter = 3.0;
  double noise = 0.25;
};

struct PretrainSection {
  std::string optimizer = "adamw";
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::size_t batch = 16;
  double warmup_epochs = 3;
  bool cosine = true;
  double weight_decay = 1e-4;
  double momentum = 0.9;
};

struct FinetuneSection {
  std::string optimizer = "sgd";
  std::size_t epochs = 20;
  double lr = 1e-3;
  std::size_t batch = 32;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t decay_every = 40;
  double decay = 0.1;
  bool filter_grad = true;
  std::string mask_mode = "attn";  // attn | zero-embed
  bool mask_pre_pos = false;
};

struct ScoreSection {
  std::size_t images = 0;  // leading training images scored, 0 for all
  std::string dl_sign = "importance";
  std::size_t chunk = 0;
};

struct LabelSection {
  bool has_rho = false;  // otherwise rho comes from label_ratio
  double rho = 0.0;
  double label_ratio = 0.35;  // fraction of scored tokens labelled keep
  std::vector<double> rho_list;  // ablation sweep, empty: rho only
};

struct FilterSection {
  std::string mode = "learned";  // learned | random | all-keep | random-init
  bool use_global = true;
  bool aap_includes_class = false;
  float threshold = 0.5f;
  double keep_ratio = 0.0;  // random / random-init; 0 matches the learned filter
  double lr = 1e-2;
  double weight_decay = 1e-4;
  std::size_t batch = 64;
  std::size_t max_epochs = 200;
  std::size_t patience = 5;
  double pos_weight = 1.0;
  std::uint64_t init_seed = 7;
};

struct BenchSection {
  std::size_t batch = 64;
  std::size_t warmup = 64;
  std::size_t repeats = 5;
};

struct RunConfig {
  ModelConfig model;
  DataSection data;
  PretrainSection pretrain;
  FinetuneSection finetune;
  ScoreSection score;
  LabelSection label;
  FilterSection filter;
  BenchSection bench;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0: DLVIT_THREADS or the hardware count
  std::string out_dir = "runs/default";

  std::size_t thread_count() const;
  // ConfigError naming the offending field.
  void validate() const;
};

std::string config_to_json(const RunConfig& c, int indent = 2);
// Compact JSON of the named top-level sections only, e.g. {"model", "seed"}.
std::string config_sections_json(const RunConfig& c, const std::vector<std::string>& keys);
// Overlays the keys present in `json_text` onto `base`. Unknown keys and
// ill-typed values raise ConfigError.
RunConfig merge_config_json(RunConfig base, const std::string& json_text, const std::string& source = "config");
RunConfig load_config_file(RunConfig base, const std::filesystem::path& path);

// run_header.json: version, command, seed, dl sign, threads and the full config.
void write_run_header(const std::filesystem::path& dir, const std::string& command, const RunConfig& c);

TrainSchedule pretrain_schedule(const RunConfig& c);
TrainSchedule finetune_schedule(const RunConfig& c);
FinetuneOptions finetune_options(const RunConfig& c, const MaskPolicy& policy);
FilterTrainOptions filter_train_options(const RunConfig& c);
FilterMeta filter_meta(const RunConfig& c, double rho);
ScoreOptions score_options(const RunConfig& c);
ForwardOptions forward_options(const RunConfig& c);
SyntheticSpec synthetic_spec(const RunConfig& c, bool validation);

// Manifest path, or a directory holding manifest.csv or a single CSV manifest.
Dataset load_data_arg(const std::string& arg);
// The configured split, or the synthetic one when the path is empty.
Dataset resolve_split(const RunConfig& c, bool validation);
// The first `n` samples (all when n is 0 or too large).
Dataset head(const Dataset& d, std::size_t n);

// rho from the config, or the value giving the configured label ratio.
double choose_rho(const RunConfig& c, std::span<const DeltaLossRecord> records);

// Samples whose ids occur in `records`, in dataset order.
Dataset select_scored(const Dataset& d, std::span<const DeltaLossRecord> records);

MaskPolicy mask_policy(const RunConfig& c, FilterMode mode, double keep_ratio);

struct FilterStage {
  FilterMLP filter;
  FilterTrainReport report;
  double rho = 0;
  std::size_t positives = 0, labelled = 0;
};
// Labels `records` in place at the chosen rho and trains a fresh filter on
// the scored samples.
FilterStage run_filter_stage(const RunConfig& c, const VitModel& backbone, const Dataset& scored,
                             std::vector<DeltaLossRecord>& records);

struct Arm {
  FinetuneResult tuned;
  EvalReport report;
};
// Fine-tunes under `policy`, then evaluates in drop mode without timing.
Arm finetune_arm(const RunConfig& c, const VitModel& backbone, const FilterMLP& filter, const Dataset& train,
                 const Dataset& val, const MaskPolicy& policy, const EpochCallback& on_epoch = {});

// ---- content hashes and stage markers --------------------------------------

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
// IoError when unreadable.
std::uint64_t hash_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

// A stage runs unless <dir>/.stages/<name> holds the current input hash and
// every output exists. Output hashes are recorded after a run so downstream
// stages see changes.
class StageRunner {
 public:
  explicit StageRunner(std::filesystem::path dir) : dir_(std::move(dir)) {}
  // Returns true when the stage ran, false when it was skipped.
  bool run(const std::string& name, const std::string& config_text, const std::vector<std::filesystem::path>& inputs,
           const std::vector<std::filesystem::path>& outputs, const std::function<void()>& body);
  std::filesystem::path marker(const std::string& name) const { return dir_ / ".stages" / name; }

 private:
  std::filesystem::path dir_;
};

// ---- filter analyses --------------------------------------------------------

// Mean keep decision per patch position over the dataset.
SpatialGrid mask_average_grid(const VitModel& model, const FilterMLP* filter, const Dataset& data,
                              const MaskPolicy& policy, std::size_t threads = 1);

struct RelevanceSplit {
  double object = 0;      // mean keep probability over relevant patches
  double background = 0;  // over the rest
  std::size_t object_count = 0, background_count = 0;
};
// ContractError when the dataset carries no relevance grids.
RelevanceSplit keep_probability_by_relevance(const VitModel& model, const FilterMLP& filter, const Dataset& data,
                                             std::size_t threads = 1);

// Writes dl_hist.csv and dl_patch_grid.csv into dir.
DlStatistics write_dl_statistics(const std::filesystem::path& dir, std::span<const DeltaLossRecord> records,
                                 std::size_t grid_side);

}  // namespace dlvit
