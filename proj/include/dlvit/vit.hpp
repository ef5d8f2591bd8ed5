#pragma once

// A small pre-norm vision transformer with per-token key masking.
//
// Sequence layout: row 0 is the class token, rows 1..N are patch tokens in
// raster order. Masking removes patch tokens from every attention (logit -inf
// plus zeroed value row), which makes a masked full-length forward equal to a
// forward over the physically shortened sequence.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dlvit/tensor.hpp"

namespace dlvit {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t dim = 64;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 10;

  std::size_t grid_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid_side() * grid_side(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return dim / heads; }
  std::size_t hidden_dim() const { return dim * mlp_ratio; }
  std::size_t pixel_count() const { return image_size * image_size * channels; }

  // Throws ConfigError when the shape invariants do not hold.
  void validate() const;

  // The DeiT-Tiny shape at 224 px / 16 px patches.
  static ModelConfig deit_tiny();
  static ModelConfig deit_small();

  bool operator==(const ModelConfig&) const = default;
};

// Embedded tokens of one image, positional embeddings already added.
struct TokenMatrix {
  Tensor patch_tokens;  // [N x d]
  Tensor class_token;   // [1 x d]
  std::string image_id;

  std::size_t size() const { return patch_tokens.rows(); }
};

// Keep/drop decision per patch token. The class token is never masked.
class KeepMask {
 public:
  KeepMask() = default;
  explicit KeepMask(std::vector<std::uint8_t> keep) : keep_(std::move(keep)) {}
  static KeepMask all(std::size_t n) { return KeepMask(std::vector<std::uint8_t>(n, 1)); }

  std::size_t size() const { return keep_.size(); }
  bool kept(std::size_t i) const { return keep_.at(i) != 0; }
  void set(std::size_t i, bool keep) { keep_.at(i) = keep ? 1 : 0; }
  std::size_t kept_count() const;
  double kept_ratio() const { return keep_.empty() ? 0.0 : static_cast<double>(kept_count()) / keep_.size(); }
  std::vector<std::size_t> kept_indices() const;
  std::span<const std::uint8_t> bits() const { return keep_; }

  bool operator==(const KeepMask&) const = default;

 private:
  std::vector<std::uint8_t> keep_;
};

// How a dropped token is hidden during a full-length forward.
enum class MaskMode {
  attention,   // key logit -inf and zero value row (exact drop equivalent)
  zero_embed,  // token embedding replaced by zeros, still attended to
};

struct ForwardOptions {
  MaskMode mode = MaskMode::attention;
  // zero_embed only: zero the patch projection but keep the positional term.
  bool mask_pre_pos = false;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct BlockWeights {
  Tensor ln1_g, ln1_b;
  Tensor qkv_w, qkv_b;  // [d x 3d], [3d]
  Tensor proj_w, proj_b;
  Tensor ln2_g, ln2_b;
  Tensor fc1_w, fc1_b;  // [d x hidden]
  Tensor fc2_w, fc2_b;  // [hidden x d]
};

class VitModel {
 public:
  VitModel() = default;
  // Truncated-normal(0.02) projections, zero biases, unit LayerNorm gains.
  static VitModel init(const ModelConfig& config, std::uint64_t seed);
  // Rebuilds a model from "vit.*" entries; throws ConfigError if any are missing.
  static VitModel from_tensors(const std::map<std::string, Tensor>& tensors);

  const ModelConfig& config() const { return config_; }
  // Deep copy with its own storage.
  VitModel clone() const;

  // Names are stable and double as checkpoint keys.
  NamedTensors named_parameters() const;
  std::vector<Tensor> parameters() const;
  // "vit.config" record plus every parameter.
  NamedTensors state() const;

  // Pixels are channel-major [C x H x W] in [0, 1].
  TokenMatrix embed(std::span<const float> image, std::string image_id = {}, Tape* tape = nullptr) const;

  // Logits [1 x C]. A null mask keeps every token.
  Tensor forward(const TokenMatrix& tokens, const KeepMask* mask = nullptr, Tape* tape = nullptr,
                 const ForwardOptions& opts = {}) const;

  // Full-length sequences, one mask per sequence (empty span = keep all).
  // Returns logits [B x C]. `gates`, when given, holds one [N] tensor per
  // sequence whose values scale the patch token rows on entry.
  Tensor forward_batch(std::span<const TokenMatrix> tokens, std::span<const KeepMask> masks, Tape* tape = nullptr,
                       const ForwardOptions& opts = {}, std::span<const Tensor> gates = {}) const;

  // Physically shortened sequences: only kept patch tokens plus the class
  // token are fed to the blocks. All masks must keep the same count.
  Tensor forward_reduced(std::span<const TokenMatrix> tokens, std::span<const KeepMask> masks) const;

  // Runs the blocks on packed sequences [B*S x d] with an optional key mask.
  Tensor forward_sequences(const Tensor& x, std::size_t batch, std::span<const std::uint8_t> key_keep,
                           Tape* tape) const;

  // Raw patch projection without positional terms, [N x d]; for tests.
  Tensor patch_projection(std::span<const float> image) const;
  // Flattened patches [N x P] in (channel, row, col) order within a patch.
  Tensor patchify(std::span<const float> image) const;

  const Tensor& pos_embed() const { return pos_embed_; }
  const Tensor& head_weight() const { return head_w_; }
  const Tensor& head_bias() const { return head_b_; }
  std::vector<BlockWeights>& blocks() { return blocks_; }

 private:
  ModelConfig config_;
  Tensor patch_w_, patch_b_;  // [P x d], [d]
  Tensor cls_token_;          // [1 x d]
  Tensor pos_embed_;          // [(N+1) x d], row 0 belongs to the class token
  std::vector<BlockWeights> blocks_;
  Tensor norm_g_, norm_b_;
  Tensor head_w_, head_b_;  // [d x C], [C]
};

// Mask with token i cleared, on top of `base` (all-keep when null).
KeepMask masked_variant(const TokenMatrix& tokens, std::size_t i, const KeepMask* base = nullptr);

// Config stored as a float record in checkpoints.
Tensor encode_config(const ModelConfig& config);
ModelConfig decode_config(const Tensor& record);

}  // namespace dlvit
