#include "dlvit/optim.hpp"

#include <cmath>

namespace dlvit {

Sgd::Sgd(std::vector<Tensor> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  if (momentum_ != 0.0) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0f);
  }
}

void Sgd::step(double lr) {
  const auto wd = static_cast<float>(weight_decay_);
  const auto mu = static_cast<float>(momentum_);
  const auto step = static_cast<float>(lr);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    auto w = p.data();
    const bool has = p.has_grad();
    auto g = has ? p.grad() : std::span<const float>{};
    if (momentum_ != 0.0) {
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const float gi = (has ? g[i] : 0.0f) + wd * w[i];
        v[i] = mu * v[i] + gi;
        w[i] -= step * v[i];
      }
    } else {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= step * ((has ? g[i] : 0.0f) + wd * w[i]);
    }
  }
  zero_grad();
}

void Sgd::zero_grad() {
  for (auto& p : params_)
    if (p.has_grad()) p.zero_grad();
}

AdamW::AdamW(std::vector<Tensor> params, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0f);
    v_.emplace_back(p.numel(), 0.0f);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  const auto b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
  const auto step = static_cast<float>(lr / c1);
  const auto inv_c2 = static_cast<float>(1.0 / c2);
  const auto eps = static_cast<float>(eps_);
  const auto decay = static_cast<float>(lr * wd_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    auto w = p.data();
    const bool has = p.has_grad();
    auto g = has ? p.grad() : std::span<const float>{};
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const float gi = has ? g[i] : 0.0f;
      m[i] = b1 * m[i] + (1.0f - b1) * gi;
      v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
      w[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps) + decay * w[i];
    }
  }
  zero_grad();
}

void AdamW::zero_grad() {
  for (auto& p : params_)
    if (p.has_grad()) p.zero_grad();
}

}  // namespace dlvit
