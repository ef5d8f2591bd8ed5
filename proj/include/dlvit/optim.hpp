#pragma once

#include <vector>

#include "dlvit/tensor.hpp"

namespace dlvit {

// SGD with optional momentum and L2 weight decay folded into the gradient:
//   g <- g + wd * w;  v <- mu * v + g;  w <- w - lr * v
class Sgd {
 public:
  Sgd() = default;
  Sgd(std::vector<Tensor> params, double momentum = 0.0, double weight_decay = 0.0);

  // Applies one update and clears the gradients. Parameters without a
  // gradient (unused in the step) only receive weight decay.
  void step(double lr);
  void zero_grad();
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> velocity_;
  double momentum_ = 0.0;
  double weight_decay_ = 0.0;
};

// Adam with decoupled weight decay: w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<Tensor> params, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  void step(double lr);
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  double wd_ = 0, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  long long t_ = 0;
};

}  // namespace dlvit
