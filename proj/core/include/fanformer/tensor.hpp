// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace fanformer {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

/// Dense row-major f64 tensor. Values are shared copy-on-nothing: ops never
/// mutate their inputs, so sharing the buffer across copies is safe.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor row(std::vector<double> values, bool requires_grad = false);
  // 2-d initializer, rows of equal length.
  static Tensor matrix(const std::vector<std::vector<double>>& rows,
                       bool requires_grad = false);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::size_t rows() const;
  std::size_t cols() const;

  const std::vector<double>& data() const { return *data_; }
  std::vector<double>& data() { return *data_; }
  double at(std::size_t i, std::size_t j) const { return (*data_)[i * cols() + j]; }
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }
  bool defined() const { return static_cast<bool>(data_); }

  // Identity of the underlying buffer; used as the leaf key on a tape.
  const void* id() const { return data_.get(); }

  // Tape bookkeeping, managed by ops.
  int node = -1;
  std::uint64_t tape_id = 0;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  bool requires_grad_ = false;
};

/// Records one training step's computation for reverse-mode differentiation.
/// Single-owner; one active tape per thread at a time.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Node id for a tensor, registering it as a leaf if needed.
  int node_of(const Tensor& t);
  int emit(Tensor& out, std::vector<int> parents,
           std::function<void(Tape&, int)> backward);

  // Reverse accumulation from a scalar root. Gradients for all grad-enabled
  // leaves reachable from the root are populated afterwards.
  void backward(const Tensor& root);

  Tensor grad(const Tensor& t) const;
  bool has_grad(const Tensor& t) const;

  Tensor& grad_buffer(int node_id, const Shape& shape);
  const Tensor& grad_at(int node_id) const { return grads_[node_id]; }

  std::uint64_t id() const { return id_; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<int> parents;
    std::function<void(Tape&, int)> backward;  // null for leaves
    Shape shape;
  };
  std::uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::unordered_map<const void*, int> leaves_;
  Tape* previous_ = nullptr;
};

enum class UnaryKind { cos, sin, exp, swish, neg, reciprocal, sqrt, gelu, sigmoid };

// FLOPs metering hooked into matmul (2*m*n*p per product). Categories follow
// the accounting used by the cost analysis: attention projections + score and
// value products, FFN products, output head; everything else is "other".
enum class FlopCategory { attn, ffn, head, other };

class FlopsMeter {
 public:
  FlopsMeter();
  ~FlopsMeter();
  static FlopsMeter* active();
  void add(FlopCategory cat, long long flops);
  long long total(FlopCategory cat) const { return totals_[static_cast<int>(cat)]; }
  long long grand_total() const;

 private:
  long long totals_[4] = {0, 0, 0, 0};
  FlopsMeter* previous_ = nullptr;
};

/// Sets the category matmuls are billed to while in scope.
class FlopScope {
 public:
  explicit FlopScope(FlopCategory cat);
  ~FlopScope();
  static FlopCategory current();

 private:
  FlopCategory previous_;
};

// ---- differentiable operations -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_bias_row(const Tensor& x, const Tensor& bias);   // bias: 1 x n
Tensor mul_bias_row(const Tensor& x, const Tensor& gain);   // gain: 1 x n
Tensor row_scale(const Tensor& x, const Tensor& r);         // r: m x 1
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor unary(UnaryKind kind, const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
Tensor concat_lastdim(const std::vector<Tensor>& parts);
Tensor slice_lastdim(const Tensor& x, std::size_t start, std::size_t width);
Tensor sum(const Tensor& x);  // scalar 1x1
Tensor embedding_lookup(const Tensor& table, std::span<const int> tokens);
Tensor gather_rows(const Tensor& x, std::span<const int> rows);
// Rotary position embedding over an l x d table (d even), positions 0..l-1.
Tensor rope(const Tensor& x, double base = 10000.0);
// Mean negative log-softmax over positions with mask[i] true.
Tensor masked_cross_entropy(const Tensor& logits, std::span<const int> targets,
                            std::span<const std::uint8_t> mask);

double sigmoid_scalar(double x);
double gelu_scalar(double x);

}  // namespace fanformer
