#include "dlvit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "dlvit/error.hpp"
#include "fastmath.hpp"

#ifdef DLVIT_HAVE_EIGEN
#include <Eigen/Core>
#endif
#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace dlvit {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---- Tensor ---------------------------------------------------------------

#ifdef __GLIBC__
namespace {
// Activation buffers of a few hundred KB are allocated and freed every step;
// served by mmap they page-fault on each use. Keep them on the heap instead.
const bool heap_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();
}  // namespace
#endif

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " + std::to_string(data.size()) +
                         " elements");
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from({1}, {value}, requires_grad); }

std::size_t Tensor::cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }

std::size_t Tensor::rows() const {
  const std::size_t c = cols();
  return c == 0 ? 0 : numel() / c;
}

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

std::span<float> Tensor::grad_mut() const {
  if (node_->grad.size() != node_->data.size()) node_->grad.assign(node_->data.size(), 0.0f);
  return node_->grad;
}

void Tensor::zero_grad() const {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

Tensor Tensor::detach() const { return from(node_->shape, node_->data, false); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("reshape: " + shape_str(this->shape()) + " -> " + shape_str(shape));
  }
  return from(std::move(shape), node_->data, false);
}

// ---- Tape -----------------------------------------------------------------

bool Tape::tracks(std::initializer_list<const Tensor*> inputs) const {
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor Tape::make_output(Shape shape) const {
  Tensor out = Tensor::zeros(std::move(shape), true);
  out.node_->tape = this;
  return out;
}

void Tape::record(std::string_view kind, std::vector<Tensor> inputs, Tensor output,
                  std::function<void()> backward) {
  ops_.push_back(Op{kind, std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ContractError("backward: root must be a scalar, got " +
                        (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  }
  if (root.node()->tape != this) throw ContractError("backward: root was not produced by this tape");
  for (auto& op : ops_) op.output.zero_grad();
  Tensor r = root;
  r.grad_mut()[0] = 1.0f;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
}

// ---- kernels --------------------------------------------------------------

namespace kernels {

#ifdef DLVIT_HAVE_EIGEN

namespace {
using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;
}  // namespace

void gemm_acc(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
              std::size_t k, std::size_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MMap(c.data(), M, N).noalias() += CMap(a.data(), M, K) * CMap(b.data(), K, N);
}

// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt_acc(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
                 std::size_t k, std::size_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MMap(c.data(), M, N).noalias() += CMap(a.data(), M, K) * CMap(b.data(), N, K).transpose();
}

// c[m x n] += a[k x m]^T * b[k x n]
void gemm_tn_acc(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
                 std::size_t k, std::size_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  MMap(c.data(), M, N).noalias() += CMap(a.data(), K, M).transpose() * CMap(b.data(), K, N);
}

#else

void gemm_acc(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
              std::size_t k, std::size_t n) {
  const float* __restrict pa = a.data();
  const float* __restrict pb = b.data();
  float* __restrict pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = pc + i * n;
    const float* arow = pa + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt_acc(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
                 std::size_t k, std::size_t n) {
  std::vector<float> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_acc(a, bt, c, m, k, n);
}

void gemm_tn_acc(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
                 std::size_t k, std::size_t n) {
  const float* __restrict pa = a.data();
  const float* __restrict pb = b.data();
  float* __restrict pc = c.data();
  for (std::size_t p = 0; p < k; ++p) {
    const float* arow = pa + p * m;
    const float* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const float av = arow[i];
      float* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

#endif

}  // namespace kernels

namespace {

bool tracking(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  return tape != nullptr && tape->tracks(inputs);
}

Tensor make_out(Tape* tape, bool tracked, Shape shape) {
  return tracked ? tape->make_output(std::move(shape)) : Tensor::zeros(std::move(shape));
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_finite(std::span<const float> v, const char* op) {
  for (float x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace

// ---- linear algebra ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const bool tracked = tracking(tape, {&a, &b});
  Tensor out = make_out(tape, tracked, {m, n});
  kernels::gemm_acc(a.data(), b.data(), out.data(), m, k, n);
  if (tracked) {
    tape->record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
      if (a.requires_grad()) kernels::gemm_nt_acc(out.grad(), b.data(), a.grad_mut(), m, n, k);
      if (b.requires_grad()) kernels::gemm_tn_acc(a.data(), out.grad(), b.grad_mut(), k, m, n);
    });
  }
  return out;
}

Tensor transpose(const Tensor& a, Tape* tape) {
  require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const bool tracked = tracking(tape, {&a});
  Tensor out = make_out(tape, tracked, {n, m});
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[j * m + i] = x[i * n + j];
  if (tracked) {
    tape->record("transpose", {a}, out, [a, out, m, n]() mutable {
      auto g = a.grad_mut();
      auto go = out.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += go[j * m + i];
    });
  }
  return out;
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  require_same_shape(a, b, "add");
  const bool tracked = tracking(tape, {&a, &b});
  Tensor out = make_out(tape, tracked, a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (tracked) {
    tape->record("add", {a, b}, out, [a, b, out]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b, Tape* tape) {
  require_same_shape(a, b, "sub");
  const bool tracked = tracking(tape, {&a, &b});
  Tensor out = make_out(tape, tracked, a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  if (tracked) {
    tape->record("sub", {a, b}, out, [a, b, out]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  require_same_shape(a, b, "mul");
  const bool tracked = tracking(tape, {&a, &b});
  Tensor out = make_out(tape, tracked, a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (tracked) {
    tape->record("mul", {a, b}, out, [a, b, out]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.grad_mut();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * y[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad_mut();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * x[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float s, Tape* tape) {
  const bool tracked = tracking(tape, {&a});
  Tensor out = make_out(tape, tracked, a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
  if (tracked) {
    tape->record("scale", {a}, out, [a, out, s]() mutable {
      auto g = a.grad_mut();
      auto go = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * s;
    });
  }
  return out;
}

Tensor add_bias(const Tensor& a, const Tensor& bias, Tape* tape) {
  const std::size_t n = a.cols();
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(a.shape()));
  }
  const bool tracked = tracking(tape, {&a, &bias});
  Tensor out = make_out(tape, tracked, a.shape());
  auto o = out.data();
  auto x = a.data();
  auto bb = bias.data();
  const std::size_t m = a.rows();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = x[i * n + j] + bb[j];
  if (tracked) {
    tape->record("add_bias", {a, bias}, out, [a, bias, out, m, n]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
      if (bias.requires_grad()) {
        auto g = bias.grad_mut();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += go[i * n + j];
      }
    });
  }
  return out;
}

Tensor add_tiled(const Tensor& a, const Tensor& b, Tape* tape) {
  const std::size_t n = a.cols();
  const std::size_t t = b.rows();
  if (b.cols() != n || t == 0 || a.rows() % t != 0) {
    throw DimensionError("add_tiled: cannot tile " + shape_str(b.shape()) + " over " + shape_str(a.shape()));
  }
  const bool tracked = tracking(tape, {&a, &b});
  Tensor out = make_out(tape, tracked, a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  const std::size_t period = t * n;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i % period];
  if (tracked) {
    tape->record("add_tiled", {a, b}, out, [a, b, out, period]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad_mut();
        for (std::size_t i = 0; i < go.size(); ++i) g[i % period] += go[i];
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& a, Tape* tape) {
  const bool tracked = tracking(tape, {&a});
  Tensor out = make_out(tape, tracked, a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0.0f ? x[i] : 0.0f;
  if (tracked) {
    tape->record("relu", {a}, out, [a, out]() mutable {
      auto g = a.grad_mut();
      auto go = out.grad();
      auto x = a.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0f) g[i] += go[i];
    });
  }
  return out;
}

Tensor gelu(const Tensor& a, Tape* tape) {
  constexpr float inv_sqrt2 = 0.70710678118654752f;
  constexpr float inv_sqrt_2pi = 0.39894228040143268f;
  const bool tracked = tracking(tape, {&a});
  Tensor out = make_out(tape, tracked, a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = 0.5f * x[i] * (1.0f + fastmath::erf(x[i] * inv_sqrt2));
  if (tracked) {
    tape->record("gelu", {a}, out, [a, out]() mutable {
      auto g = a.grad_mut();
      auto go = out.grad();
      auto x = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float cdf = 0.5f * (1.0f + fastmath::erf(x[i] * inv_sqrt2));
        const float pdf = inv_sqrt_2pi * fastmath::exp(-0.5f * x[i] * x[i]);
        g[i] += go[i] * (cdf + x[i] * pdf);
      }
    });
  }
  return out;
}

namespace {
inline float stable_sigmoid(float z) {
  if (z >= 0.0f) return 1.0f / (1.0f + std::exp(-z));
  const float e = std::exp(z);
  return e / (1.0f + e);
}
}  // namespace

Tensor sigmoid(const Tensor& a, Tape* tape) {
  const bool tracked = tracking(tape, {&a});
  Tensor out = make_out(tape, tracked, a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = stable_sigmoid(x[i]);
  if (tracked) {
    tape->record("sigmoid", {a}, out, [a, out]() mutable {
      auto g = a.grad_mut();
      auto go = out.grad();
      auto y = out.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * y[i] * (1.0f - y[i]);
    });
  }
  return out;
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a, Tape* tape) {
  const bool tracked = tracking(tape, {&a});
  Tensor out = make_out(tape, tracked, {1});
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  out.data()[0] = static_cast<float>(acc);
  if (tracked) {
    tape->record("sum", {a}, out, [a, out]() mutable {
      auto g = a.grad_mut();
      const float go = out.grad()[0];
      for (auto& v : g) v += go;
    });
  }
  return out;
}

Tensor mean(const Tensor& a, Tape* tape) {
  if (a.numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(a, tape), 1.0f / static_cast<float>(a.numel()), tape);
}

Tensor mean_rows(const Tensor& a, Tape* tape) {
  const std::size_t m = a.rows(), n = a.cols();
  if (m == 0) throw ContractError("mean_rows: no rows");
  const bool tracked = tracking(tape, {&a});
  Tensor out = make_out(tape, tracked, {1, n});
  auto o = out.data();
  auto x = a.data();
  std::vector<double> acc(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) acc[j] += x[i * n + j];
  for (std::size_t j = 0; j < n; ++j) o[j] = static_cast<float>(acc[j] / static_cast<double>(m));
  if (tracked) {
    tape->record("mean_rows", {a}, out, [a, out, m, n]() mutable {
      auto g = a.grad_mut();
      auto go = out.grad();
      const float inv = 1.0f / static_cast<float>(m);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += go[j] * inv;
    });
  }
  return out;
}

// ---- row / column plumbing ------------------------------------------------

Tensor concat_rows(const std::vector<Tensor>& parts, Tape* tape) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.cols() != n) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    m += p.rows();
    any_grad = any_grad || p.requires_grad();
  }
  const bool tracked = tape != nullptr && any_grad;
  Tensor out = make_out(tape, tracked, {m, n});
  auto o = out.data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.numel();
  }
  if (tracked) {
    tape->record("concat_rows", parts, out, [parts, out]() mutable {
      auto go = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto g = p.grad_mut();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[off + i];
        }
        off += p.numel();
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows, Tape* tape) {
  const std::size_t m = a.rows(), n = a.cols();
  for (std::size_t r : rows) {
    if (r >= m) throw IndexError("gather_rows: row " + std::to_string(r) + " out of range for " + shape_str(a.shape()));
  }
  const bool tracked = tracking(tape, {&a});
  Tensor out = make_out(tape, tracked, {rows.size(), n});
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(rows[i] * n), n, o.begin() + static_cast<std::ptrdiff_t>(i * n));
  if (tracked) {
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    tape->record("gather_rows", {a}, out, [a, out, idx = std::move(idx), n]() mutable {
      auto g = a.grad_mut();
      auto go = out.grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += go[i * n + j];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t offset, std::size_t width, Tape* tape) {
  const std::size_t m = a.rows(), n = a.cols();
  if (offset + width > n) {
    throw IndexError("slice_cols: [" + std::to_string(offset) + ", " + std::to_string(offset + width) +
                     ") out of range for " + shape_str(a.shape()));
  }
  const bool tracked = tracking(tape, {&a});
  Tensor out = make_out(tape, tracked, {m, width});
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < width; ++j) o[i * width + j] = x[i * n + offset + j];
  if (tracked) {
    tape->record("slice_cols", {a}, out, [a, out, m, n, offset, width]() mutable {
      auto g = a.grad_mut();
      auto go = out.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < width; ++j) g[i * n + offset + j] += go[i * width + j];
    });
  }
  return out;
}

Tensor concat_cols_broadcast(const Tensor& a, const Tensor& v, Tape* tape) {
  const std::size_t m = a.rows(), n = a.cols(), k = v.numel();
  const bool tracked = tracking(tape, {&a, &v});
  Tensor out = make_out(tape, tracked, {m, n + k});
  auto o = out.data();
  auto x = a.data();
  auto y = v.data();
  const std::size_t w = n + k;
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(i * n), n, o.begin() + static_cast<std::ptrdiff_t>(i * w));
    std::copy_n(y.begin(), k, o.begin() + static_cast<std::ptrdiff_t>(i * w + n));
  }
  if (tracked) {
    tape->record("concat_cols_broadcast", {a, v}, out, [a, v, out, m, n, k, w]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.grad_mut();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += go[i * w + j];
      }
      if (v.requires_grad()) {
        auto g = v.grad_mut();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < k; ++j) g[j] += go[i * w + n + j];
      }
    });
  }
  return out;
}

Tensor scale_rows(const Tensor& a, const Tensor& s, Tape* tape) {
  const std::size_t m = a.rows(), n = a.cols();
  if (s.numel() != m) {
    throw DimensionError("scale_rows: " + shape_str(s.shape()) + " does not match rows of " + shape_str(a.shape()));
  }
  const bool tracked = tracking(tape, {&a, &s});
  Tensor out = make_out(tape, tracked, a.shape());
  auto o = out.data();
  auto x = a.data();
  auto f = s.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = x[i * n + j] * f[i];
  if (tracked) {
    tape->record("scale_rows", {a, s}, out, [a, s, out, m, n]() mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.grad_mut();
        auto f = s.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += go[i * n + j] * f[i];
      }
      if (s.requires_grad()) {
        auto g = s.grad_mut();
        auto x = a.data();
        for (std::size_t i = 0; i < m; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(go[i * n + j]) * x[i * n + j];
          g[i] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor straight_through(std::span<const float> hard, const Tensor& soft, Tape* tape) {
  if (hard.size() != soft.numel()) {
    throw DimensionError("straight_through: " + std::to_string(hard.size()) + " hard values for " +
                         shape_str(soft.shape()));
  }
  const bool tracked = tracking(tape, {&soft});
  Tensor out = make_out(tape, tracked, soft.shape());
  std::copy(hard.begin(), hard.end(), out.data().begin());
  if (tracked) {
    tape->record("straight_through", {soft}, out, [soft, out]() mutable {
      auto g = soft.grad_mut();
      auto go = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
    });
  }
  return out;
}

// ---- normalisation and attention -----------------------------------------

Tensor softmax_lastdim(const Tensor& a, Tape* tape) {
  const std::size_t m = a.rows(), n = a.cols();
  if (n == 0) throw ContractError("softmax_lastdim: empty last dimension");
  require_finite(a.data(), "softmax_lastdim");
  const bool tracked = tracking(tape, {&a});
  Tensor out = make_out(tape, tracked, a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    const float* row = x.data() + i * n;
    float* orow = o.data() + i * n;
    const float mx = *std::max_element(row, row + n);
    for (std::size_t j = 0; j < n; ++j) orow[j] = fastmath::exp(row[j] - mx);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += orow[j];
    const float inv = static_cast<float>(1.0 / total);
    for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
  }
  if (tracked) {
    tape->record("softmax_lastdim", {a}, out, [a, out, m, n]() mutable {
      auto g = a.grad_mut();
      auto go = out.grad();
      auto y = out.data();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(go[i * n + j]) * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          g[i * n + j] += y[i * n + j] * (go[i * n + j] - static_cast<float>(dot));
      }
    });
  }
  return out;
}

Tensor layernorm(const Tensor& a, const Tensor& gamma, const Tensor& beta, float eps, Tape* tape) {
  const std::size_t m = a.rows(), n = a.cols();
  if (gamma.numel() != n || beta.numel() != n) {
    throw DimensionError("layernorm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match " + shape_str(a.shape()));
  }
  if (!(eps > 0.0f)) throw ContractError("layernorm: eps must be positive");
  const bool tracked = tracking(tape, {&a, &gamma, &beta});
  Tensor out = make_out(tape, tracked, a.shape());
  std::vector<float> xhat(a.numel());
  std::vector<float> rstd(m);
  auto o = out.data();
  auto x = a.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  for (std::size_t i = 0; i < m; ++i) {
    const float* row = x.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double dlt = row[j] - mu;
      var += dlt * dlt;
    }
    var /= static_cast<double>(n);
    const double r = 1.0 / std::sqrt(var + eps);
    rstd[i] = static_cast<float>(r);
    for (std::size_t j = 0; j < n; ++j) {
      const float xh = static_cast<float>((row[j] - mu) * r);
      xhat[i * n + j] = xh;
      o[i * n + j] = xh * gm[j] + bt[j];
    }
  }
  if (tracked) {
    tape->record("layernorm", {a, gamma, beta}, out,
                 [a, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), m, n]() mutable {
                   auto go = out.grad();
                   if (gamma.requires_grad()) {
                     auto g = gamma.grad_mut();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) g[j] += go[i * n + j] * xhat[i * n + j];
                   }
                   if (beta.requires_grad()) {
                     auto g = beta.grad_mut();
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) g[j] += go[i * n + j];
                   }
                   if (a.requires_grad()) {
                     auto g = a.grad_mut();
                     auto gm = gamma.data();
                     std::vector<float> dxh(n);
                     for (std::size_t i = 0; i < m; ++i) {
                       double s1 = 0.0, s2 = 0.0;
                       for (std::size_t j = 0; j < n; ++j) {
                         dxh[j] = go[i * n + j] * gm[j];
                         s1 += dxh[j];
                         s2 += static_cast<double>(dxh[j]) * xhat[i * n + j];
                       }
                       const float m1 = static_cast<float>(s1 / static_cast<double>(n));
                       const float m2 = static_cast<float>(s2 / static_cast<double>(n));
                       for (std::size_t j = 0; j < n; ++j)
                         g[i * n + j] += rstd[i] * (dxh[j] - m1 - xhat[i * n + j] * m2);
                     }
                   }
                 });
  }
  return out;
}

Tensor attention(const Tensor& qkv, std::size_t batch, std::size_t heads, std::span<const std::uint8_t> key_keep,
                 Tape* tape) {
  require_rank2(qkv, "attention");
  const std::size_t rows = qkv.dim(0);
  const std::size_t width = qkv.dim(1);
  if (batch == 0 || rows % batch != 0) {
    throw DimensionError("attention: " + std::to_string(rows) + " rows do not split into " + std::to_string(batch) +
                         " sequences");
  }
  if (width % 3 != 0 || heads == 0 || (width / 3) % heads != 0) {
    throw DimensionError("attention: qkv width " + std::to_string(width) + " incompatible with " +
                         std::to_string(heads) + " heads");
  }
  if (!key_keep.empty() && key_keep.size() != rows) {
    throw DimensionError("attention: key mask has " + std::to_string(key_keep.size()) + " entries for " +
                         std::to_string(rows) + " rows");
  }
  const std::size_t seq = rows / batch;
  const std::size_t d = width / 3;
  const std::size_t dh = d / heads;
  const float scale_f = 1.0f / std::sqrt(static_cast<float>(dh));
  const bool masked = !key_keep.empty();
  std::vector<std::uint8_t> keep(key_keep.begin(), key_keep.end());
  if (masked) {
    for (std::size_t b = 0; b < batch; ++b) {
      const auto first = keep.begin() + static_cast<std::ptrdiff_t>(b * seq);
      if (std::none_of(first, first + static_cast<std::ptrdiff_t>(seq), [](std::uint8_t k) { return k != 0; })) {
        throw ContractError("attention: sequence " + std::to_string(b) + " has every key masked");
      }
    }
  }

  const bool tracked = tracking(tape, {&qkv});
  Tensor out = make_out(tape, tracked, {rows, d});
  std::vector<float> probs(tracked ? batch * heads * seq * seq : seq * seq);
  std::vector<float> q(seq * dh), k(seq * dh), v(seq * dh), ctx(seq * dh);
  auto x = qkv.data();
  auto o = out.data();

  auto load = [&](std::size_t b, std::size_t h) {
    for (std::size_t s = 0; s < seq; ++s) {
      const float* row = x.data() + (b * seq + s) * width + h * dh;
      const bool kept = !masked || keep[b * seq + s] != 0;
      for (std::size_t j = 0; j < dh; ++j) {
        q[s * dh + j] = row[j];
        k[s * dh + j] = row[d + j];
        v[s * dh + j] = kept ? row[2 * d + j] : 0.0f;
      }
    }
  };

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      load(b, h);
      float* p = probs.data() + (tracked ? (b * heads + h) * seq * seq : 0);
      std::fill(p, p + seq * seq, 0.0f);
      kernels::gemm_nt_acc(q, k, std::span<float>(p, seq * seq), seq, dh, seq);
      for (std::size_t s = 0; s < seq; ++s) {
        float* row = p + s * seq;
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t t = 0; t < seq; ++t) {
          row[t] *= scale_f;
          if ((!masked || keep[b * seq + t]) && row[t] > mx) mx = row[t];
        }
        for (std::size_t t = 0; t < seq; ++t) row[t] = fastmath::exp(row[t] - mx);
        if (masked) {
          const std::uint8_t* kb = keep.data() + b * seq;
          for (std::size_t t = 0; t < seq; ++t) row[t] = kb[t] ? row[t] : 0.0f;
        }
        double total = 0.0;
        for (std::size_t t = 0; t < seq; ++t) total += row[t];
        if (!std::isfinite(total)) throw NumericError("attention: non-finite attention logits");
        const float inv = static_cast<float>(1.0 / total);
        for (std::size_t t = 0; t < seq; ++t) row[t] *= inv;
      }
      std::fill(ctx.begin(), ctx.end(), 0.0f);
      kernels::gemm_acc(std::span<const float>(p, seq * seq), v, ctx, seq, seq, dh);
      for (std::size_t s = 0; s < seq; ++s)
        std::copy_n(ctx.begin() + static_cast<std::ptrdiff_t>(s * dh), dh,
                    o.begin() + static_cast<std::ptrdiff_t>((b * seq + s) * d + h * dh));
    }
  }

  if (tracked) {
    tape->record("attention", {qkv}, out,
                 [qkv, out, probs = std::move(probs), keep = std::move(keep), batch, heads, seq, d, dh, width,
                  scale_f, masked]() mutable {
                   auto x = qkv.data();
                   auto go = out.grad();
                   auto g = qkv.grad_mut();
                   std::vector<float> q(seq * dh), k(seq * dh), v(seq * dh), dout(seq * dh);
                   std::vector<float> dp(seq * seq), dq(seq * dh), dk(seq * dh), dv(seq * dh);
                   for (std::size_t b = 0; b < batch; ++b) {
                     for (std::size_t h = 0; h < heads; ++h) {
                       for (std::size_t s = 0; s < seq; ++s) {
                         const float* row = x.data() + (b * seq + s) * width + h * dh;
                         const bool kept = !masked || keep[b * seq + s] != 0;
                         for (std::size_t j = 0; j < dh; ++j) {
                           q[s * dh + j] = row[j];
                           k[s * dh + j] = row[d + j];
                           v[s * dh + j] = kept ? row[2 * d + j] : 0.0f;
                           dout[s * dh + j] = go[(b * seq + s) * d + h * dh + j];
                         }
                       }
                       const float* p = probs.data() + (b * heads + h) * seq * seq;
                       std::span<const float> pspan(p, seq * seq);
                       std::fill(dp.begin(), dp.end(), 0.0f);
                       kernels::gemm_nt_acc(dout, v, dp, seq, dh, seq);
                       std::fill(dv.begin(), dv.end(), 0.0f);
                       kernels::gemm_tn_acc(pspan, dout, dv, seq, seq, dh);
                       // dp becomes the gradient w.r.t. the scaled logits.
                       for (std::size_t s = 0; s < seq; ++s) {
                         double dot = 0.0;
                         for (std::size_t t = 0; t < seq; ++t)
                           dot += static_cast<double>(dp[s * seq + t]) * p[s * seq + t];
                         for (std::size_t t = 0; t < seq; ++t)
                           dp[s * seq + t] = p[s * seq + t] * (dp[s * seq + t] - static_cast<float>(dot)) * scale_f;
                       }
                       std::fill(dq.begin(), dq.end(), 0.0f);
                       kernels::gemm_acc(dp, k, dq, seq, seq, dh);
                       std::fill(dk.begin(), dk.end(), 0.0f);
                       kernels::gemm_tn_acc(dp, q, dk, seq, seq, dh);
                       for (std::size_t s = 0; s < seq; ++s) {
                         float* grow = g.data() + (b * seq + s) * width + h * dh;
                         const bool kept = !masked || keep[b * seq + s] != 0;
                         for (std::size_t j = 0; j < dh; ++j) {
                           grow[j] += dq[s * dh + j];
                           grow[d + j] += dk[s * dh + j];
                           if (kept) grow[2 * d + j] += dv[s * dh + j];
                         }
                       }
                     }
                   }
                 });
  }
  return out;
}

// ---- losses ---------------------------------------------------------------

namespace {

void check_labels(std::size_t rows, std::size_t classes, std::span<const int> labels, const char* op) {
  if (labels.size() != rows) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rows) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw IndexError(std::string(op) + ": label " + std::to_string(l) + " outside [0, " + std::to_string(classes) +
                       ")");
    }
  }
}

}  // namespace

std::vector<double> cross_entropy_rows(const Tensor& logits, std::span<const int> labels) {
  const std::size_t m = logits.rows(), c = logits.cols();
  check_labels(m, c, labels, "cross_entropy");
  auto x = logits.data();
  std::vector<double> losses(m);
  for (std::size_t i = 0; i < m; ++i) {
    const float* row = x.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(static_cast<double>(row[j]) - mx);
    losses[i] = mx + std::log(total) - static_cast<double>(row[labels[i]]);
  }
  return losses;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, Tape* tape) {
  const std::size_t m = logits.rows(), c = logits.cols();
  const auto losses = cross_entropy_rows(logits, labels);
  double total = 0.0;
  for (double l : losses) total += l;
  const bool tracked = tracking(tape, {&logits});
  Tensor out = make_out(tape, tracked, {1});
  out.data()[0] = static_cast<float>(total / static_cast<double>(m));
  if (tracked) {
    std::vector<int> lab(labels.begin(), labels.end());
    tape->record("cross_entropy", {logits}, out, [logits, out, lab = std::move(lab), m, c]() mutable {
      auto g = logits.grad_mut();
      auto x = logits.data();
      const float go = out.grad()[0] / static_cast<float>(m);
      for (std::size_t i = 0; i < m; ++i) {
        const float* row = x.data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < c; ++j) {
          const double p = std::exp(row[j] - mx) / total;
          const double onehot = static_cast<int>(j) == lab[i] ? 1.0 : 0.0;
          g[i * c + j] += go * static_cast<float>(p - onehot);
        }
      }
    });
  }
  return out;
}

namespace {
inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
}  // namespace

Tensor bce_with_logits(const Tensor& logits, std::span<const float> targets, float pos_weight, Tape* tape) {
  const std::size_t m = logits.numel();
  if (targets.size() != m) {
    throw DimensionError("bce_with_logits: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()));
  }
  if (m == 0) throw ContractError("bce_with_logits: empty batch");
  auto z = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double t = targets[i];
    total += pos_weight * t * softplus(-z[i]) + (1.0 - t) * softplus(z[i]);
  }
  const bool tracked = tracking(tape, {&logits});
  Tensor out = make_out(tape, tracked, {1});
  out.data()[0] = static_cast<float>(total / static_cast<double>(m));
  if (tracked) {
    std::vector<float> tg(targets.begin(), targets.end());
    tape->record("bce_with_logits", {logits}, out, [logits, out, tg = std::move(tg), m, pos_weight]() mutable {
      auto g = logits.grad_mut();
      auto z = logits.data();
      const float go = out.grad()[0] / static_cast<float>(m);
      for (std::size_t i = 0; i < m; ++i) {
        const float s = stable_sigmoid(z[i]);
        g[i] += go * (pos_weight * tg[i] * (s - 1.0f) + (1.0f - tg[i]) * s);
      }
    });
  }
  return out;
}

}  // namespace dlvit
