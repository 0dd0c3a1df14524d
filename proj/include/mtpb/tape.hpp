#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mtpb {

/// Dense row-major matrix of 64-bit reals. Every tensor in the pipeline is
/// either one of these or a row-stacked view of a higher-rank tensor.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

class ParameterStore;

namespace nn {

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Mat& value() const;
  const Mat& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode recording of a forward computation.
///
/// Nodes are appended in evaluation order, so a reverse sweep over the node
/// list is a valid topological order for backpropagation. A tape constructed
/// with `record = false` keeps values only; use it for frozen inference.
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  /// Trainable leaf whose gradient is readable through Var::grad().
  Var leaf(Mat value);
  /// Leaf bound to a stored parameter; backward() adds into the store's
  /// gradient buffer.
  Var param(ParameterStore& store, const std::string& path);

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and propagates. Gradients of
  /// bound parameters are accumulated into their stores.
  void backward(Var out);

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  /// Hash of the active/inactive pattern of every piecewise-linear op
  /// evaluated so far. Two evaluations with equal signatures lie on the same
  /// smooth piece of the function.
  std::uint64_t kink_signature() const { return kink_signature_; }
  void mix_kink_signature(const Mat& pre_activation);

  // Op-author interface.
  Var push(Mat value, std::vector<int> parents, Backward back);
  const Mat& value(int id) const { return nodes_[id].value; }
  const Mat& grad(int id) const;
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  /// Adds into the gradient of `id` (no-op if the node needs no gradient).
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    auto& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    Backward back;
    bool needs_grad = false;
  };
  struct Binding {
    int node;
    ParameterStore* store;
    std::string path;
  };

  bool record_;
  std::uint64_t kink_signature_ = 1469598103934665603ULL;
  std::vector<Node> nodes_;
  std::vector<Binding> bindings_;
  Mat empty_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Shapes are checked and violations throw
// std::invalid_argument.

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// Adds a 1 x cols row vector to every row.
Var add_row(Var a, Var row);
/// Multiplies every row elementwise by a 1 x cols row vector.
Var mul_row(Var a, Var row);
Var relu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var softmax_rows(Var a);
/// Row-wise layer normalization followed by the affine map gamma, beta.
Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5);
/// Row-major reinterpretation; rows*cols must be preserved.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
/// out.row(i) = a.row(index[i]); repeated indices accumulate gradient.
Var gather_rows(Var a, const std::vector<int>& index);
/// Treats `a` as `blocks` stacked sequences of `len` rows and delays each
/// sequence by `shift` rows, zero-filling the head.
Var shift_in_blocks(Var a, int blocks, int len, int shift);
/// Mean over the `len` rows of each of `blocks` stacked sequences.
Var block_mean(Var a, int blocks, int len);
/// Divides each row by its sum; rows summing to zero are left as zeros.
Var row_normalize(Var a);
Var sum(Var a);
Var mean(Var a);
/// Sum of squared entries.
Var sum_squares(Var a);
/// Mean squared error over entries where `mask` is nonzero (all entries when
/// `mask` is empty). An empty inclusion set yields 0 with zero gradient.
Var mse(Var pred, const Mat& truth, const Mat& mask = Mat());
/// Solves M X = B for symmetric positive-definite M by Cholesky.
/// Throws std::runtime_error when M is not numerically SPD or non-finite.
Var solve_spd(Var m, Var b);
/// Multi-head scaled dot-product self-attention over `blocks` stacked
/// sequences of equal length. q, k, v are (blocks*len) x d. When
/// `weights_out` is given, it receives one len x len matrix per
/// (block, head), block-major.
Var attention(Var q, Var k, Var v, int blocks, int heads,
              std::vector<Mat>* weights_out = nullptr);

}  // namespace nn
}  // namespace mtpb
