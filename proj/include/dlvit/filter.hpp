#pragma once

// Token filter: per-token descriptors [x_i | mean of tokens] scored by a
// three-layer MLP with a sigmoid output.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlvit/scorer.hpp"
#include "dlvit/vit.hpp"

namespace dlvit {

// Mean of the patch-token rows, [1 x d]. With include_class the class token
// joins the average.
Tensor global_feature(const TokenMatrix& tokens, bool include_class = false, Tape* tape = nullptr);

// [N x 2d] rows [x_i | global] or, without the global feature, the token
// rows themselves [N x d].
Tensor build_descriptors(const TokenMatrix& tokens, bool use_global, bool include_class = false,
                         Tape* tape = nullptr);

struct FilterMeta {
  bool use_global = true;
  float threshold = 0.5f;
  DlSign sign = DlSign::importance;
  double rho = 0.0;
  bool aap_includes_class = false;
};

// Keep bit i = p_i >= threshold. When nothing survives, the ceil(5% N) most
// probable tokens are kept instead (ties broken by lower index).
KeepMask mask_from_probabilities(std::span<const float> p, float threshold);
// Exactly k tokens with the highest probabilities (ties by lower index).
KeepMask top_k_mask(std::span<const float> p, std::size_t k);
std::size_t floor_keep_count(std::size_t n);

class FilterMLP {
 public:
  FilterMLP() = default;
  // Widths [in -> 2d -> 100 -> 1], in = 2d with the global feature and d
  // without. Weights and biases uniform in +-1/sqrt(fan_in).
  static FilterMLP init(std::size_t dim, const FilterMeta& meta, std::uint64_t seed);
  // Rebuilds from "filter.*" entries; ConfigError when any are missing.
  static FilterMLP from_tensors(const std::map<std::string, Tensor>& tensors);
  static bool present_in(const std::map<std::string, Tensor>& tensors);

  const FilterMeta& meta() const { return meta_; }
  FilterMeta& meta() { return meta_; }
  std::vector<std::size_t> widths() const;
  std::size_t input_width() const { return l1_w_.dim(0); }
  bool defined() const { return l1_w_.defined(); }

  NamedTensors named_parameters() const;
  std::vector<Tensor> parameters() const;
  // parameters plus the "filter.meta" record
  NamedTensors state() const;

  // [M x 1] pre-sigmoid scores for descriptor rows [M x in].
  Tensor logits(const Tensor& descriptors, Tape* tape = nullptr) const;
  // [N] keep probabilities for one image.
  Tensor probabilities(const TokenMatrix& tokens, Tape* tape = nullptr) const;
  std::vector<float> predict_proba(const TokenMatrix& tokens) const;
  KeepMask predict_mask(const TokenMatrix& tokens, std::optional<float> threshold = std::nullopt) const;

  // Sets the last layer's weights and bias to zero.
  void zero_last_layer();

 private:
  FilterMeta meta_;
  Tensor l1_w_, l1_b_, l2_w_, l2_b_, l3_w_, l3_b_;
};

Tensor encode_filter_meta(const FilterMeta& meta);
FilterMeta decode_filter_meta(const Tensor& record);

// Descriptors of every token with a pseudo-label, rows aligned with labels.
struct FilterCorpus {
  Tensor descriptors;  // [M x in]
  std::vector<float> labels;
  std::vector<std::size_t> token_index;
  std::size_t positives() const;
};

// Matches records to samples by image id; ContractError when a labelled
// record has no sample or a sample has unlabelled tokens.
FilterCorpus build_corpus(const VitModel& model, const Dataset& data, std::span<const DeltaLossRecord> records,
                          const FilterMeta& meta, std::size_t threads = 1);

struct FilterTrainOptions {
  double lr = 1e-2;
  double weight_decay = 1e-4;
  std::size_t batch = 64;
  std::size_t max_epochs = 200;
  std::size_t patience = 5;
  double min_delta = 1e-4;
  float pos_weight = 1.0f;
  std::uint64_t seed = 0;
};

struct FilterTrainReport {
  std::size_t epochs = 0;
  std::vector<double> epoch_loss;
  double train_accuracy = 0;
  bool early_stopped = false;
};

// Plain SGD on binary cross-entropy until the epoch-mean loss fails to improve
// by min_delta for `patience` epochs (or max_epochs). TrainingError when the
// corpus holds a single class.
FilterMLP train_filter(const FilterCorpus& corpus, FilterMLP filter, const FilterTrainOptions& opts,
                       FilterTrainReport* report = nullptr);

// Fraction of corpus rows whose prediction (p >= threshold) matches the label.
double filter_accuracy(const FilterMLP& filter, const FilterCorpus& corpus, float threshold = 0.5f);

}  // namespace dlvit
