#pragma once

// Backbone pretraining, filter-equipped fine-tuning with masked full-length
// sequences, and token-dropping inference.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlvit/dataset.hpp"
#include "dlvit/filter.hpp"
#include "dlvit/flops.hpp"
#include "dlvit/vit.hpp"

namespace dlvit {

enum class FilterMode {
  learned,         // trained filter, p >= threshold
  random_discard,  // uniformly random k-subset per image
  all_keep,        // no filtering
  random_init,     // untrained filter, top-k by probability
};

const char* filter_mode_name(FilterMode m);
// "learned", "random", "all-keep", "random-init"
FilterMode parse_filter_mode(const std::string& s);

enum class Optimizer { sgd, adamw };
const char* optimizer_name(Optimizer o);
Optimizer parse_optimizer(const std::string& s);

struct TrainSchedule {
  Optimizer optimizer = Optimizer::sgd;
  std::size_t epochs = 30;
  double base_lr = 0.05;
  std::size_t decay_every = 40;
  double decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  // cosine to zero over `epochs` instead of step decay
  bool cosine = false;
  double warmup_epochs = 0;

  // Step decay: base_lr * decay^floor(epoch / decay_every). `epoch` may be
  // fractional (position within the run); warmup ramps linearly from zero.
  double lr(double epoch) const;
  void validate() const;

  static TrainSchedule pretrain_defaults();
  static TrainSchedule finetune_defaults();
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;
  double accuracy = 0;
  double keep_ratio = 1;
};

// How the keep mask of each image is chosen.
struct MaskPolicy {
  FilterMode mode = FilterMode::learned;
  float threshold = 0.5f;
  double keep_ratio = 1.0;  // random_discard / random_init: kept fraction
  std::uint64_t seed = 0;   // random_discard draws

  bool uses_filter() const { return mode == FilterMode::learned || mode == FilterMode::random_init; }
};

std::size_t matched_keep_count(double ratio, std::size_t n);
KeepMask random_keep_mask(std::size_t n, std::size_t k, SplitMix64& rng);
// Mask for one image. `p` holds filter probabilities when the policy uses a
// filter, otherwise it is ignored. `rng` feeds random_discard.
KeepMask choose_mask(const MaskPolicy& policy, std::span<const float> p, std::size_t n, SplitMix64& rng);
// Per-image generator for random_discard during evaluation.
SplitMix64 image_rng(std::uint64_t seed, std::size_t index);

using EpochCallback = std::function<void(const EpochLog&)>;

// Plain cross-entropy training of a freshly initialised backbone (init seed =
// schedule.seed). TrainingError with fewer than two classes; DivergenceError
// on a non-finite loss.
VitModel pretrain(const ModelConfig& config, const Dataset& data, const TrainSchedule& schedule,
                  std::vector<EpochLog>* log = nullptr, const EpochCallback& on_epoch = {});

struct FinetuneOptions {
  TrainSchedule schedule = TrainSchedule::finetune_defaults();
  MaskPolicy policy;
  // Straight-through gradients into the filter; off freezes the filter.
  bool filter_grad = true;
  ForwardOptions forward;
};

struct FinetuneResult {
  VitModel model;
  FilterMLP filter;
  std::vector<EpochLog> log;
};

// Trains copies of the backbone (and filter) end to end. Masked tokens are
// hidden in full-length sequences; the filter receives gradients through
// straight-through gates on the kept tokens.
FinetuneResult finetune(const VitModel& backbone, const FilterMLP& filter, const Dataset& data,
                        const FinetuneOptions& opts, const EpochCallback& on_epoch = {});

struct Prediction {
  std::string image_id;
  int predicted = 0;
  std::vector<float> logits;
  KeepMask mask;
};

// Filter once, then drop the masked tokens and run the shortened sequences;
// images with equal kept counts share a forward call. `first_index` offsets
// the per-image random streams.
std::vector<Prediction> infer(const VitModel& model, const FilterMLP* filter, std::span<const Sample> samples,
                              const MaskPolicy& policy, std::size_t first_index = 0);
// Same masks, but evaluated as masked full-length sequences.
std::vector<Prediction> infer_masked(const VitModel& model, const FilterMLP* filter, std::span<const Sample> samples,
                                     const MaskPolicy& policy, std::size_t first_index = 0,
                                     const ForwardOptions& forward = {});

struct EvalOptions {
  MaskPolicy policy;
  std::size_t batch = 64;
  std::size_t warmup = 64;  // forwards before timing
  std::size_t threads = 1;
  bool measure_throughput = true;
  bool drop = true;  // false evaluates masked full-length sequences
};

struct EvalReport {
  std::size_t images = 0;
  double top1 = 0, top5 = 0;
  double keep_ratio = 1;
  std::uint64_t macs_full = 0, macs_filtered = 0;
  std::uint64_t params = 0;
  double throughput = 0;  // images/s, 0 when not measured
  std::size_t threads = 1, batch = 0;
  std::vector<std::size_t> kept_counts;
  std::vector<int> predictions;
};

EvalReport evaluate(const VitModel& model, const FilterMLP* filter, const Dataset& data, const EvalOptions& opts);

// Seconds for one pass of drop-mode inference over `samples` in batches.
double timed_inference_pass(const VitModel& model, const FilterMLP* filter, std::span<const Sample> samples,
                            const MaskPolicy& policy, std::size_t batch, std::size_t threads);
void warm_up(const VitModel& model, const FilterMLP* filter, std::span<const Sample> samples,
             const MaskPolicy& policy, std::size_t forwards, std::size_t batch);

std::string format_report(const EvalReport& r);
// name,top1,top5,keep_ratio,macs_full,macs_filtered,params,throughput,threads,batch
void write_reports_csv(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, EvalReport>>& rows);

// Backbone (+ filter) tensors in checkpoint form.
std::map<std::string, Tensor> checkpoint_tensors(const VitModel& model, const FilterMLP* filter = nullptr);

}  // namespace dlvit
