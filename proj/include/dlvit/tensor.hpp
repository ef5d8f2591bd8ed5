#pragma once

// Dense float32 tensors with a reverse-mode gradient tape.
//
// Tensors are cheap handles onto shared storage. Every op takes an optional
// Tape*; with a null tape the op is a plain forward computation and the result
// never tracks gradients. With a tape, the op appends its backward closure to
// the tape whenever at least one input requires a gradient.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dlvit {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tape;

struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  const Tape* tape = nullptr;  // producing tape, null for leaves
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  // Size of the last dimension, and the product of the leading ones.
  std::size_t cols() const;
  std::size_t rows() const;

  std::span<float> data() { return node_->data; }
  std::span<const float> data() const { return node_->data; }
  const std::vector<float>& vec() const { return node_->data; }
  float item() const;
  float at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const float> grad() const { return node_->grad; }
  // Allocates (zero-filled) on first use.
  std::span<float> grad_mut() const;
  void zero_grad() const;

  // Same data in a new node that is detached from any tape.
  Tensor detach() const;
  Tensor clone() const { return detach(); }
  // Copy of the data under a new shape (same element count); untracked.
  Tensor reshaped(Shape shape) const;

  TensorNode* node() const { return node_.get(); }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  friend class Tape;
  std::shared_ptr<TensorNode> node_;
};

// Append-only record of differentiable ops. Backward walks the record in
// strict reverse insertion order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // True when an op over these inputs must be recorded.
  bool tracks(std::initializer_list<const Tensor*> inputs) const;

  // Creates the output node of a recorded op.
  Tensor make_output(Shape shape) const;

  void record(std::string_view kind, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward);

  std::size_t size() const { return ops_.size(); }
  std::string_view kind(std::size_t i) const { return ops_.at(i).kind; }

  // Seeds d(root)/d(root) = 1 and propagates to every reachable leaf that
  // requires a gradient. Leaf gradients accumulate across calls; gradients of
  // intermediate nodes are recomputed each time.
  void backward(const Tensor& root);

 private:
  struct Op {
    std::string_view kind;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };
  std::vector<Op> ops_;
};

inline void backward(Tape& tape, const Tensor& root) { tape.backward(root); }

// ---- linear algebra ------------------------------------------------------

// [m x k] * [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor transpose(const Tensor& a, Tape* tape = nullptr);

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor sub(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scale(const Tensor& a, float s, Tape* tape = nullptr);
// a [rows x n] + bias [n] broadcast over rows.
Tensor add_bias(const Tensor& a, const Tensor& bias, Tape* tape = nullptr);
// a [rows*t x n] + b [t x n], b tiled over the leading batch.
Tensor add_tiled(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor relu(const Tensor& a, Tape* tape = nullptr);
Tensor gelu(const Tensor& a, Tape* tape = nullptr);
Tensor sigmoid(const Tensor& a, Tape* tape = nullptr);

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a, Tape* tape = nullptr);
Tensor mean(const Tensor& a, Tape* tape = nullptr);
// Mean over rows: [m x n] -> [1 x n].
Tensor mean_rows(const Tensor& a, Tape* tape = nullptr);

// ---- row / column plumbing ------------------------------------------------

Tensor concat_rows(const std::vector<Tensor>& parts, Tape* tape = nullptr);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows, Tape* tape = nullptr);
Tensor slice_cols(const Tensor& a, std::size_t offset, std::size_t width, Tape* tape = nullptr);
// [m x n] ++ v[1 x k] repeated on every row -> [m x (n + k)].
Tensor concat_cols_broadcast(const Tensor& a, const Tensor& v, Tape* tape = nullptr);
// Row i of a multiplied by s[i]; s has numel == rows(a).
Tensor scale_rows(const Tensor& a, const Tensor& s, Tape* tape = nullptr);
// Forward value equals `hard`; the gradient passes to `soft` unchanged.
Tensor straight_through(std::span<const float> hard, const Tensor& soft, Tape* tape = nullptr);

// ---- normalisation and attention -----------------------------------------

Tensor softmax_lastdim(const Tensor& a, Tape* tape = nullptr);
Tensor layernorm(const Tensor& a, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f,
                 Tape* tape = nullptr);

// Multi-head scaled dot-product attention over `batch` sequences of equal
// length packed as rows. qkv is [batch*seq x 3d] laid out as [q | k | v].
// key_keep (optional, batch*seq entries) removes keys: their logits are -inf
// and their value rows are zeroed, so they get exactly zero weight.
Tensor attention(const Tensor& qkv, std::size_t batch, std::size_t heads,
                 std::span<const std::uint8_t> key_keep = {}, Tape* tape = nullptr);

// ---- losses ---------------------------------------------------------------

// Mean of -log softmax(logits[b])[labels[b]] over rows. logits [B x C] or [C].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, Tape* tape = nullptr);
// Per-row cross entropy in double precision, no gradient.
std::vector<double> cross_entropy_rows(const Tensor& logits, std::span<const int> labels);
// Mean binary cross entropy on logits z against targets in {0,1}.
// pos_weight scales the positive-class term.
Tensor bce_with_logits(const Tensor& logits, std::span<const float> targets, float pos_weight = 1.0f,
                       Tape* tape = nullptr);

// ---- raw kernels (exposed for benchmarks and tests) ---------------------

namespace kernels {
// c[m x n] += a[m x k] * b[k x n]
void gemm_acc(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
              std::size_t k, std::size_t n);
// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt_acc(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
                 std::size_t k, std::size_t n);
// c[m x n] += a[k x m]^T * b[k x n]
void gemm_tn_acc(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
                 std::size_t k, std::size_t n);
}  // namespace kernels

}  // namespace dlvit
