#pragma once

// Tape-free reverse-mode automatic differentiation over Tensor values.
//
// Every op records its inputs and a backward rule. Backward rules are written
// in terms of the same differentiable ops, so `grad(..., create_graph=true)`
// returns gradients that are themselves differentiable. The meta-gradient of
// trajectory matching is a gradient through SGD steps that each contain a
// gradient, which needs exactly this.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "lss/tensor.hpp"

namespace lss::ad {

class Var;

/// Computes gradients for the inputs flagged in `needs`; entries of `out`
/// left undefined are treated as zero.
using BackwardFn = std::function<void(const Var& grad, const std::vector<Var>& inputs,
                                      const std::vector<bool>& needs, std::vector<Var>& out)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> inputs;
  BackwardFn backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  /// Records an op node when grad mode is on and some input requires grad;
  /// otherwise returns a constant.
  static Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t numel() const { return node_->value.numel(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  double item() const;
  Var detach() const { return Var(value()); }
  Node* node() const noexcept { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled() noexcept;

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Gradient of `output` (seeded with ones) with respect to each of `inputs`,
/// which are treated as independent: propagation stops at them. Inputs that do
/// not influence the output receive zeros.
std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs, bool create_graph = false);

// ---- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
/// a * s where s is a rank-0 Var.
Var mul_scalar(const Var& a, const Var& s);
Var exp(const Var& a);
Var log(const Var& a);
Var pow(const Var& a, double p);
Var relu(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// ---- reductions and shape ---------------------------------------------------
Var sum(const Var& a);
/// Broadcast a rank-0 Var to `shape`.
Var expand(const Var& s, const Shape& shape);
Var reshape(const Var& a, Shape shape);
/// [R, L] -> [R]
Var row_sum(const Var& a);
Var row_mean(const Var& a);
/// [R] -> [R, L], each row constant.
Var broadcast_rows(const Var& a, std::int64_t cols);
/// [R, L] -> [L]
Var col_sum(const Var& a);
/// [L] -> [R, L], each row a copy.
Var tile_rows(const Var& a, std::int64_t rows);
/// Rows of a [R, ...] tensor selected by index (repeats allowed).
Var gather_rows(const Var& a, const std::vector<std::int64_t>& index);
/// Adjoint of gather_rows: rows of g added into a zero [rows, ...] tensor.
Var scatter_rows(const Var& g, const std::vector<std::int64_t>& index, std::int64_t rows);
/// Contiguous flat segment [offset, offset + numel(shape)) viewed as `shape`.
Var slice(const Var& a, std::int64_t offset, Shape shape);
/// Adjoint of slice: `a` written into a zero vector of length `total`.
Var embed(const Var& a, std::int64_t offset, std::int64_t total);

// ---- linear algebra ---------------------------------------------------------
/// Batched product of [B, p, q] x [B, q, s] (rank-2 operands are batch 1),
/// with optional transposition of the trailing two axes of either operand.
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);

// ---- convolution and pooling (NCHW, square odd kernel, same padding) --------
Var conv2d(const Var& x, const Var& w);
Var conv2d_input_grad(const Var& g, const Var& w, const Shape& x_shape);
Var conv2d_weight_grad(const Var& x, const Var& g, const Shape& w_shape);
/// 2x2 average pooling, stride 2, trailing odd row/column dropped.
Var avg_pool2(const Var& x);
Var avg_pool2_adjoint(const Var& g, std::int64_t height, std::int64_t width);

// ---- fixed linear maps -------------------------------------------------------
/// Sparse matrix acting on the flattened input. Used for resampling-style
/// augmentations whose coefficients do not depend on the data.
class SparseMap {
 public:
  struct Entry {
    std::int64_t row;
    std::int64_t col;
    double value;
  };
  SparseMap(std::int64_t rows, std::int64_t cols, const std::vector<Entry>& entries);
  ~SparseMap();
  std::int64_t rows() const noexcept { return rows_; }
  std::int64_t cols() const noexcept { return cols_; }
  void apply(std::span<const double> in, std::span<double> out, bool transpose) const;

 private:
  struct Impl;
  std::int64_t rows_;
  std::int64_t cols_;
  std::unique_ptr<Impl> impl_;
};

/// y = M x (or M^T x), reshaped to `out_shape`.
Var sparse_apply(const Var& x, std::shared_ptr<const SparseMap> map, bool transpose, Shape out_shape);

// ---- composite helpers -------------------------------------------------------
/// Row-wise log-softmax of a [R, L] tensor, stabilised by a detached row max.
Var log_softmax_rows(const Var& a);
Var softmax_rows(const Var& a);
/// Sum of squares.
Var squared_norm(const Var& a);

}  // namespace lss::ad
