#include "dlvit/vit.hpp"

#include <algorithm>
#include <numeric>

#include "dlvit/error.hpp"
#include "dlvit/rng.hpp"

namespace dlvit {

void ModelConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("model config: image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (channels == 0 || dim == 0 || mlp_ratio == 0 || num_classes == 0) {
    throw ConfigError("model config: channels, dim, mlp_ratio and num_classes must be positive");
  }
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("model config: dim " + std::to_string(dim) + " is not divisible by heads " +
                      std::to_string(heads));
  }
}

ModelConfig ModelConfig::deit_tiny() {
  ModelConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.channels = 3;
  c.depth = 12;
  c.heads = 3;
  c.dim = 192;
  c.mlp_ratio = 4;
  c.num_classes = 1000;
  return c;
}

ModelConfig ModelConfig::deit_small() {
  ModelConfig c = deit_tiny();
  c.heads = 6;
  c.dim = 384;
  return c;
}

std::size_t KeepMask::kept_count() const {
  return static_cast<std::size_t>(std::count_if(keep_.begin(), keep_.end(), [](std::uint8_t k) { return k != 0; }));
}

std::vector<std::size_t> KeepMask::kept_indices() const {
  std::vector<std::size_t> idx;
  idx.reserve(keep_.size());
  for (std::size_t i = 0; i < keep_.size(); ++i)
    if (keep_[i]) idx.push_back(i);
  return idx;
}

KeepMask masked_variant(const TokenMatrix& tokens, std::size_t i, const KeepMask* base) {
  const std::size_t n = tokens.size();
  if (i >= n) throw IndexError("masked_variant: token " + std::to_string(i) + " out of range for N=" + std::to_string(n));
  KeepMask m = base ? *base : KeepMask::all(n);
  if (m.size() != n) throw ContractError("masked_variant: base mask length does not match N");
  m.set(i, false);
  return m;
}

Tensor encode_config(const ModelConfig& c) {
  return Tensor::from({8}, {static_cast<float>(c.image_size), static_cast<float>(c.patch_size),
                            static_cast<float>(c.channels), static_cast<float>(c.depth), static_cast<float>(c.heads),
                            static_cast<float>(c.dim), static_cast<float>(c.mlp_ratio),
                            static_cast<float>(c.num_classes)});
}

ModelConfig decode_config(const Tensor& record) {
  if (record.numel() != 8) throw ConfigError("vit.config record must hold 8 values");
  auto v = record.data();
  ModelConfig c;
  c.image_size = static_cast<std::size_t>(v[0]);
  c.patch_size = static_cast<std::size_t>(v[1]);
  c.channels = static_cast<std::size_t>(v[2]);
  c.depth = static_cast<std::size_t>(v[3]);
  c.heads = static_cast<std::size_t>(v[4]);
  c.dim = static_cast<std::size_t>(v[5]);
  c.mlp_ratio = static_cast<std::size_t>(v[6]);
  c.num_classes = static_cast<std::size_t>(v[7]);
  c.validate();
  return c;
}

namespace {

Tensor trunc_normal(Shape shape, SplitMix64& rng, double std = 0.02) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.truncated_normal(std));
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor ones_param(Shape shape) { return Tensor::full(std::move(shape), 1.0f, true); }

}  // namespace

VitModel VitModel::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  SplitMix64 rng(seed);
  const std::size_t d = config.dim, h = config.hidden_dim(), n = config.num_patches();
  VitModel m;
  m.config_ = config;
  m.patch_w_ = trunc_normal({config.patch_dim(), d}, rng);
  m.patch_b_ = zeros_param({d});
  m.cls_token_ = trunc_normal({1, d}, rng);
  m.pos_embed_ = trunc_normal({n + 1, d}, rng);
  for (std::size_t i = 0; i < config.depth; ++i) {
    BlockWeights b;
    b.ln1_g = ones_param({d});
    b.ln1_b = zeros_param({d});
    b.qkv_w = trunc_normal({d, 3 * d}, rng);
    b.qkv_b = zeros_param({3 * d});
    b.proj_w = trunc_normal({d, d}, rng);
    b.proj_b = zeros_param({d});
    b.ln2_g = ones_param({d});
    b.ln2_b = zeros_param({d});
    b.fc1_w = trunc_normal({d, h}, rng);
    b.fc1_b = zeros_param({h});
    b.fc2_w = trunc_normal({h, d}, rng);
    b.fc2_b = zeros_param({d});
    m.blocks_.push_back(std::move(b));
  }
  m.norm_g_ = ones_param({d});
  m.norm_b_ = zeros_param({d});
  m.head_w_ = trunc_normal({d, config.num_classes}, rng);
  m.head_b_ = zeros_param({config.num_classes});
  return m;
}

NamedTensors VitModel::named_parameters() const {
  NamedTensors out = {
      {"vit.patch_embed.w", patch_w_},
      {"vit.patch_embed.b", patch_b_},
      {"vit.cls_token", cls_token_},
      {"vit.pos_embed", pos_embed_},
  };
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    const std::string p = "vit.blocks." + std::to_string(i) + ".";
    out.emplace_back(p + "ln1.g", b.ln1_g);
    out.emplace_back(p + "ln1.b", b.ln1_b);
    out.emplace_back(p + "attn.qkv.w", b.qkv_w);
    out.emplace_back(p + "attn.qkv.b", b.qkv_b);
    out.emplace_back(p + "attn.proj.w", b.proj_w);
    out.emplace_back(p + "attn.proj.b", b.proj_b);
    out.emplace_back(p + "ln2.g", b.ln2_g);
    out.emplace_back(p + "ln2.b", b.ln2_b);
    out.emplace_back(p + "mlp.fc1.w", b.fc1_w);
    out.emplace_back(p + "mlp.fc1.b", b.fc1_b);
    out.emplace_back(p + "mlp.fc2.w", b.fc2_w);
    out.emplace_back(p + "mlp.fc2.b", b.fc2_b);
  }
  out.emplace_back("vit.norm.g", norm_g_);
  out.emplace_back("vit.norm.b", norm_b_);
  out.emplace_back("vit.head.w", head_w_);
  out.emplace_back("vit.head.b", head_b_);
  return out;
}

std::vector<Tensor> VitModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

NamedTensors VitModel::state() const {
  NamedTensors out = {{"vit.config", encode_config(config_)}};
  for (auto& nt : named_parameters()) out.push_back(nt);
  return out;
}

VitModel VitModel::from_tensors(const std::map<std::string, Tensor>& tensors) {
  auto cfg = tensors.find("vit.config");
  if (cfg == tensors.end()) throw ConfigError("checkpoint has no vit.config record");
  VitModel m = init(decode_config(cfg->second), 0);
  for (auto& [name, param] : m.named_parameters()) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("checkpoint is missing tensor " + name);
    if (it->second.shape() != param.shape()) {
      throw ConfigError("checkpoint tensor " + name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                        shape_str(param.shape()));
    }
    std::copy(it->second.data().begin(), it->second.data().end(), param.data().begin());
  }
  return m;
}

VitModel VitModel::clone() const {
  std::map<std::string, Tensor> m;
  for (auto& [k, v] : state()) m[k] = v;
  return from_tensors(m);
}

Tensor VitModel::patchify(std::span<const float> image) const {
  const auto& c = config_;
  if (image.size() != c.pixel_count()) {
    throw ConfigError("embed: image has " + std::to_string(image.size()) + " values, config expects " +
                      std::to_string(c.pixel_count()));
  }
  const std::size_t g = c.grid_side(), p = c.patch_size, hw = c.image_size;
  Tensor out = Tensor::zeros({c.num_patches(), c.patch_dim()});
  auto o = out.data();
  std::size_t w = 0;
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t ch = 0; ch < c.channels; ++ch)
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px) o[w++] = image[(ch * hw + gy * p + py) * hw + gx * p + px];
  return out;
}

Tensor VitModel::patch_projection(std::span<const float> image) const {
  return add_bias(matmul(patchify(image), patch_w_), patch_b_);
}

TokenMatrix VitModel::embed(std::span<const float> image, std::string image_id, Tape* tape) const {
  const std::size_t n = config_.num_patches();
  std::vector<std::size_t> patch_rows(n);
  std::iota(patch_rows.begin(), patch_rows.end(), std::size_t{1});
  const std::size_t cls_row = 0;
  Tensor proj = add_bias(matmul(patchify(image), patch_w_, tape), patch_b_, tape);
  TokenMatrix t;
  t.patch_tokens = add(proj, gather_rows(pos_embed_, patch_rows, tape), tape);
  t.class_token = add(cls_token_, gather_rows(pos_embed_, std::span<const std::size_t>(&cls_row, 1), tape), tape);
  t.image_id = std::move(image_id);
  return t;
}

Tensor VitModel::forward(const TokenMatrix& tokens, const KeepMask* mask, Tape* tape, const ForwardOptions& opts) const {
  if (mask) return forward_batch(std::span<const TokenMatrix>(&tokens, 1), std::span<const KeepMask>(mask, 1), tape, opts);
  return forward_batch(std::span<const TokenMatrix>(&tokens, 1), {}, tape, opts);
}

Tensor VitModel::forward_sequences(const Tensor& x0, std::size_t batch, std::span<const std::uint8_t> key_keep,
                                   Tape* tape) const {
  Tensor x = x0;
  for (const auto& b : blocks_) {
    Tensor h = layernorm(x, b.ln1_g, b.ln1_b, 1e-5f, tape);
    Tensor qkv = add_bias(matmul(h, b.qkv_w, tape), b.qkv_b, tape);
    Tensor ctx = attention(qkv, batch, config_.heads, key_keep, tape);
    x = add(x, add_bias(matmul(ctx, b.proj_w, tape), b.proj_b, tape), tape);
    h = layernorm(x, b.ln2_g, b.ln2_b, 1e-5f, tape);
    h = gelu(add_bias(matmul(h, b.fc1_w, tape), b.fc1_b, tape), tape);
    x = add(x, add_bias(matmul(h, b.fc2_w, tape), b.fc2_b, tape), tape);
  }
  const std::size_t seq = x.rows() / batch;
  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t i = 0; i < batch; ++i) cls_rows[i] = i * seq;
  Tensor cls = gather_rows(x, cls_rows, tape);
  cls = layernorm(cls, norm_g_, norm_b_, 1e-5f, tape);
  return add_bias(matmul(cls, head_w_, tape), head_b_, tape);
}

Tensor VitModel::forward_batch(std::span<const TokenMatrix> tokens, std::span<const KeepMask> masks, Tape* tape,
                               const ForwardOptions& opts, std::span<const Tensor> gates) const {
  const std::size_t batch = tokens.size();
  const std::size_t n = config_.num_patches();
  if (batch == 0) throw ContractError("forward: empty batch");
  if (!masks.empty() && masks.size() != batch) throw ContractError("forward: one mask per sequence required");
  if (!gates.empty() && gates.size() != batch) throw ContractError("forward: one gate per sequence required");

  std::vector<Tensor> parts;
  parts.reserve(2 * batch);
  std::vector<std::uint8_t> key_keep;
  const bool key_masking = !masks.empty() && opts.mode == MaskMode::attention;
  if (key_masking) key_keep.reserve(batch * (n + 1));

  std::vector<std::size_t> pos_rows;
  for (std::size_t b = 0; b < batch; ++b) {
    const TokenMatrix& t = tokens[b];
    if (t.size() != n || t.patch_tokens.cols() != config_.dim) {
      throw ContractError("forward: token matrix " + shape_str(t.patch_tokens.shape()) + " does not match config");
    }
    Tensor patches = t.patch_tokens;
    if (!gates.empty()) patches = scale_rows(patches, gates[b], tape);
    if (!masks.empty()) {
      const KeepMask& m = masks[b];
      if (m.size() != n) {
        throw ContractError("forward: mask length " + std::to_string(m.size()) + " != N=" + std::to_string(n));
      }
      if (m.kept_count() == 0) throw ContractError("forward: mask drops every token");
      if (key_masking) {
        key_keep.push_back(1);
        key_keep.insert(key_keep.end(), m.bits().begin(), m.bits().end());
      } else {
        std::vector<float> keepf(n), dropf(n);
        for (std::size_t i = 0; i < n; ++i) {
          keepf[i] = m.kept(i) ? 1.0f : 0.0f;
          dropf[i] = 1.0f - keepf[i];
        }
        patches = scale_rows(patches, Tensor::from({n}, keepf), tape);
        if (opts.mask_pre_pos) {
          if (pos_rows.empty()) {
            pos_rows.resize(n);
            std::iota(pos_rows.begin(), pos_rows.end(), std::size_t{1});
          }
          patches = add(patches, scale_rows(gather_rows(pos_embed_, pos_rows, tape), Tensor::from({n}, dropf), tape),
                        tape);
        }
      }
    }
    parts.push_back(t.class_token);
    parts.push_back(patches);
  }
  Tensor x = concat_rows(parts, tape);
  return forward_sequences(x, batch, key_keep, tape);
}

Tensor VitModel::forward_reduced(std::span<const TokenMatrix> tokens, std::span<const KeepMask> masks) const {
  const std::size_t batch = tokens.size();
  if (batch == 0) throw ContractError("forward_reduced: empty batch");
  if (masks.size() != batch) throw ContractError("forward_reduced: one mask per sequence required");
  const std::size_t kept = masks[0].kept_count();
  if (kept == 0) throw ContractError("forward_reduced: mask drops every token");
  std::vector<Tensor> parts;
  parts.reserve(2 * batch);
  for (std::size_t b = 0; b < batch; ++b) {
    if (masks[b].size() != tokens[b].size()) throw ContractError("forward_reduced: mask length does not match N");
    if (masks[b].kept_count() != kept) throw ContractError("forward_reduced: kept counts differ within a batch");
    const auto idx = masks[b].kept_indices();
    parts.push_back(tokens[b].class_token);
    parts.push_back(gather_rows(tokens[b].patch_tokens, idx));
  }
  return forward_sequences(concat_rows(parts), batch, {}, nullptr);
}

}  // namespace dlvit
