#pragma once

#include <Eigen/Dense>

#include <complex>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "diff/errors.hpp"

namespace diff {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using ComplexMatrixX = MatrixX<std::complex<Scalar>>;

using Matrix = MatrixX<double>;
using ComplexMatrix = ComplexMatrixX<double>;
using BoolMatrix = MatrixX<bool>;

std::string shape_string(Eigen::Index rows, Eigen::Index cols);

template <typename Derived>
std::string shape_of(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

/// Trainable matrix with an accumulated gradient of the same shape.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Matrix value);

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }

  std::string name;
  Matrix value;
  Matrix grad;
  /// Excluded from optimizer updates.
  bool frozen = false;
  /// When set, row 0 is the padding row and must stay zero.
  bool padding_row = false;
};

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
};

/// Records executed operations in order; backward walks them in exact reverse.
class Tape {
 public:
  explicit Tape(bool training = false, std::uint64_t seed = 0);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var param(Parameter& p);

  /// Seeds d(loss)/d(loss) = 1 and propagates; loss must be 1x1.
  void backward(Var loss);

  const Matrix& value(Var v) const;
  /// Gradient after backward (zeros if the node was unreachable).
  Matrix grad(Var v) const;

  bool training() const { return training_; }
  std::mt19937_64& rng() { return rng_; }
  std::size_t size() const { return nodes_.size(); }

  enum class Op {
    kConstant,
    kParam,
    kMatmul,
    kMatmulNT,
    kTranspose,
    kAdd,
    kAddN,
    kSub,
    kScale,
    kScaleBy,
    kHadamard,
    kAddRow,
    kConcatCols,
    kSliceCols,
    kSliceRows,
    kGatherRows,
    kEmbedding,
    kDropout,
    kSoftmax,
    kLogSoftmax,
    kLayerNorm,
    kCrossEntropy,
    kGelu,
    kSigmoid,
    kExp,
    kSum,
    kWeightedSum,
    kL2Normalize,
    kBandMix,
    kHeadScores,
    kHeadApply,
  };

  struct Node {
    Op op = Op::kConstant;
    std::vector<int> inputs;
    Matrix value;
    Matrix grad;
    Parameter* param = nullptr;
    double scalar = 0.0;
    Eigen::Index i0 = 0, i1 = 0;
    std::vector<int> indices;
    std::shared_ptr<const BoolMatrix> mask;
    std::shared_ptr<const Matrix> op_a, op_b;
    Matrix saved;
    Eigen::VectorXd saved_vec;
  };

  Var push(Node node);
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

 private:
  Matrix& grad_ref(int id);
  void backward_node(Node& n);

  std::vector<Node> nodes_;
  bool training_;
  std::mt19937_64 rng_;
};

// ---- differentiable ops -------------------------------------------------

Var matmul(Var a, Var b);
/// a · bᵀ
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
/// Sum of one or more same-shaped nodes.
Var add_n(std::span<const Var> parts);
Var sub(Var a, Var b);
Var scale(Var a, double s);
/// Multiplies every entry by a 1x1 node (e.g. a trainable scalar).
Var scale(Var a, Var s);
Var hadamard(Var a, Var b);
/// Adds a 1xC row to every row of an RxC matrix (explicit bias broadcast).
Var add_row(Var a, Var row);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var gather_rows(Var a, std::span<const int> rows);
/// Row lookup; ids equal to padding_id (if >= 0) yield zero rows and no gradient.
Var embedding_lookup(Var table, std::span<const int> ids, int padding_id = -1);
/// Inverted dropout. Identity when rate == 0 or the tape is not training.
Var dropout(Var a, double rate);
/// Row softmax; masked-out entries are exactly zero.
Var softmax_rows(Var a, std::shared_ptr<const BoolMatrix> mask = nullptr);
/// Row log-softmax; masked-out entries are reported as zero.
Var log_softmax_rows(Var a, std::shared_ptr<const BoolMatrix> mask = nullptr);
Var layer_norm(Var x, Var gain, Var bias, double eps);
/// Mean negative log-likelihood of the target column in each row.
Var cross_entropy_rows(Var logits, std::span<const int> targets);
Var gelu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var sum(Var a);
/// Σ w ∘ a with a constant weight matrix.
Var weighted_sum(Var a, const Matrix& weights);
/// x / sqrt(‖x‖² + eps²) per row.
Var l2_normalize_rows(Var a, double eps = 1e-12);
/// For each block of `block` rows: y = A·x + s·B·x, with s a 1x1 node.
Var band_mix(Var x, Var s, std::shared_ptr<const Matrix> low, std::shared_ptr<const Matrix> high,
             Eigen::Index block);
/// Per block i and head h: Q_i^h (K_i^h)ᵀ, stacked head-major: row h·R + i·block + j.
Var head_scores(Var q, Var k, int heads, Eigen::Index block);
/// Inverse layout of head_scores: P_i^h V_i^h with heads concatenated along columns.
Var head_apply(Var p, Var v, int heads, Eigen::Index block);

// ---- plain-matrix helpers ----------------------------------------------

/// Row softmax on a plain matrix (no tape).
Matrix softmax_rows(const Matrix& a, const BoolMatrix* mask = nullptr);
/// Standard product with a shape check naming both operands.
Matrix matmul(const Matrix& a, const Matrix& b);

void require_finite(const Matrix& m, const std::string& what);

using LossFn = std::function<Var(Tape&)>;

/// Max over all entries of |analytic − central difference| / max(1, |central difference|).
double grad_check(const LossFn& f, std::span<Parameter* const> params, double h = 1e-5);

}  // namespace diff
