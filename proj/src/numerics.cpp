#include "diff/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace diff {

namespace {

using Op = Tape::Op;
using Index = Eigen::Index;

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " + shape_of(b));
  }
}

void require_scalar(const Matrix& s, const char* op) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw ShapeError(std::string(op) + ": expected 1x1 scalar, got " + shape_of(s));
  }
}

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw std::logic_error("vars recorded on different tapes");
  return *a.tape;
}

Tape::Node make_node(Op op, std::initializer_list<int> inputs, Matrix value) {
  Tape::Node n;
  n.op = op;
  n.inputs = inputs;
  n.value = std::move(value);
  return n;
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Masked entries become −inf so exp() maps them to exactly zero.
Matrix masked_scores(const Matrix& x, const BoolMatrix* mask) {
  if (mask == nullptr) return x;
  return mask->select(x, Matrix::Constant(x.rows(), x.cols(), kNegInf));
}

Eigen::VectorXd row_max_checked(const Matrix& z) {
  Eigen::VectorXd mx = z.rowwise().maxCoeff();
  for (Index r = 0; r < mx.size(); ++r) {
    // A NaN row must stay NaN here, or it reads as fully masked.
    if (z.row(r).hasNaN()) {
      mx(r) = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    if (mx(r) == kNegInf) throw DegenerateRowError("softmax_rows: row " + std::to_string(r) + " is fully masked");
  }
  return mx;
}

// Row-wise softmax restricted to mask; fully masked rows are an error.
Matrix masked_softmax(const Matrix& x, const BoolMatrix* mask) {
  const Matrix z = masked_scores(x, mask);
  const Eigen::VectorXd mx = row_max_checked(z);
  Matrix y = (z.colwise() - mx).array().exp().matrix();
  const Eigen::VectorXd total = y.rowwise().sum();
  y.array().colwise() /= total.array();
  return y;
}

void check_mask(const Matrix& x, const BoolMatrix* mask, const char* op) {
  if (mask != nullptr && (mask->rows() != x.rows() || mask->cols() != x.cols())) {
    throw ShapeError(std::string(op) + ": mask " + shape_of(*mask) + " vs input " + shape_of(x));
  }
}

}  // namespace

std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

Parameter::Parameter(std::string name_, Matrix value_)
    : name(std::move(name_)), value(std::move(value_)), grad(Matrix::Zero(value.rows(), value.cols())) {}

const Matrix& Var::value() const { return tape->value(*this); }

double Var::scalar() const {
  const Matrix& v = value();
  require_scalar(v, "Var::scalar");
  return v(0, 0);
}

Tape::Tape(bool training, std::uint64_t seed) : training_(training), rng_(seed) {}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Matrix value) { return push(make_node(Op::kConstant, {}, std::move(value))); }

Var Tape::param(Parameter& p) {
  Node n = make_node(Op::kParam, {}, p.value);
  n.param = &p;
  return push(std::move(n));
}

const Matrix& Tape::value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Matrix& Tape::grad_ref(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  require_scalar(value(loss), "backward");
  for (Node& n : nodes_) n.grad.resize(0, 0);
  grad_ref(loss.id)(0, 0) = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) continue;
    backward_node(n);
  }
}

void Tape::backward_node(Node& n) {
  const Matrix& g = n.grad;
  auto in = [&](std::size_t k) -> const Matrix& { return nodes_[static_cast<std::size_t>(n.inputs[k])].value; };
  auto gin = [&](std::size_t k) -> Matrix& { return grad_ref(n.inputs[k]); };

  switch (n.op) {
    case Op::kConstant:
      break;
    case Op::kParam:
      n.param->grad += g;
      break;
    case Op::kMatmul:
      gin(0).noalias() += g * in(1).transpose();
      gin(1).noalias() += in(0).transpose() * g;
      break;
    case Op::kMatmulNT:
      gin(0).noalias() += g * in(1);
      gin(1).noalias() += g.transpose() * in(0);
      break;
    case Op::kTranspose:
      gin(0) += g.transpose();
      break;
    case Op::kAdd:
      gin(0) += g;
      gin(1) += g;
      break;
    case Op::kAddN:
      for (std::size_t k = 0; k < n.inputs.size(); ++k) gin(k) += g;
      break;
    case Op::kSub:
      gin(0) += g;
      gin(1) -= g;
      break;
    case Op::kScale:
      gin(0) += n.scalar * g;
      break;
    case Op::kScaleBy: {
      const double s = in(1)(0, 0);
      gin(1)(0, 0) += (in(0).array() * g.array()).sum();
      gin(0) += s * g;
      break;
    }
    case Op::kHadamard:
      gin(0).array() += g.array() * in(1).array();
      gin(1).array() += g.array() * in(0).array();
      break;
    case Op::kAddRow:
      gin(0) += g;
      gin(1) += g.colwise().sum();
      break;
    case Op::kConcatCols: {
      Index col = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        Matrix& gk = gin(k);
        gk += g.middleCols(col, gk.cols());
        col += gk.cols();
      }
      break;
    }
    case Op::kSliceCols:
      gin(0).middleCols(n.i0, n.i1) += g;
      break;
    case Op::kSliceRows:
      gin(0).middleRows(n.i0, n.i1) += g;
      break;
    case Op::kGatherRows: {
      Matrix& ga = gin(0);
      for (std::size_t r = 0; r < n.indices.size(); ++r) ga.row(n.indices[r]) += g.row(static_cast<Index>(r));
      break;
    }
    case Op::kEmbedding: {
      Matrix& gt = gin(0);
      const int pad = static_cast<int>(n.i0);
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        if (n.indices[r] == pad) continue;
        gt.row(n.indices[r]) += g.row(static_cast<Index>(r));
      }
      break;
    }
    case Op::kDropout:
      gin(0).array() += g.array() * n.saved.array();
      break;
    case Op::kSoftmax: {
      const Matrix& y = n.value;
      const Eigen::VectorXd dot = (g.array() * y.array()).rowwise().sum();
      gin(0).array() += y.array() * (g.colwise() - dot).array();
      break;
    }
    case Op::kLogSoftmax: {
      Matrix gm = n.mask ? Matrix(n.mask->select(g, Matrix::Zero(g.rows(), g.cols()))) : g;
      const Eigen::VectorXd total = gm.rowwise().sum();
      gm -= (n.saved.array().colwise() * total.array()).matrix();
      gin(0) += gm;
      break;
    }
    case Op::kLayerNorm: {
      const Matrix& xhat = n.saved;
      const auto cols = static_cast<double>(g.cols());
      gin(1) += (g.array() * xhat.array()).colwise().sum().matrix();
      gin(2) += g.colwise().sum();
      const Matrix dxhat = g.array().rowwise() * in(1).row(0).array();
      const Eigen::VectorXd mean_d = dxhat.rowwise().sum() / cols;
      const Eigen::VectorXd mean_dx = (dxhat.array() * xhat.array()).rowwise().sum() / cols;
      Matrix dx = dxhat.colwise() - mean_d;
      dx -= (xhat.array().colwise() * mean_dx.array()).matrix();
      dx.array().colwise() *= n.saved_vec.array();
      gin(0) += dx;
      break;
    }
    case Op::kCrossEntropy: {
      Matrix d = n.saved;
      const auto b = static_cast<double>(d.rows());
      for (std::size_t r = 0; r < n.indices.size(); ++r) d(static_cast<Index>(r), n.indices[r]) -= 1.0;
      gin(0) += (g(0, 0) / b) * d;
      break;
    }
    case Op::kGelu: {
      const Matrix& x = in(0);
      const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      gin(0).array() += g.array() * (n.saved.array() + x.array() * (-0.5 * x.array().square()).exp() * inv_sqrt_2pi);
      break;
    }
    case Op::kSigmoid:
      gin(0).array() += g.array() * n.value.array() * (1.0 - n.value.array());
      break;
    case Op::kExp:
      gin(0).array() += g.array() * n.value.array();
      break;
    case Op::kSum:
      gin(0).array() += g(0, 0);
      break;
    case Op::kWeightedSum:
      gin(0) += g(0, 0) * (*n.op_a);
      break;
    case Op::kL2Normalize: {
      const Matrix& y = n.value;
      const Eigen::VectorXd proj = (y.array() * g.array()).rowwise().sum();
      Matrix dx = g - (y.array().colwise() * proj.array()).matrix();
      dx.array().colwise() /= n.saved_vec.array();
      gin(0) += dx;
      break;
    }
    case Op::kBandMix: {
      const Matrix& x = in(0);
      const double s = in(1)(0, 0);
      const Matrix mix_t = (*n.op_a + s * (*n.op_b)).transpose();
      const Matrix high_t = n.op_b->transpose();
      Matrix& gx = gin(0);
      double ds = 0.0;
      const Index blk = n.i0;
      for (Index r0 = 0; r0 < x.rows(); r0 += blk) {
        const auto gb = g.middleRows(r0, blk);
        gx.middleRows(r0, blk).noalias() += mix_t * gb;
        ds += (x.middleRows(r0, blk).array() * (high_t * gb).array()).sum();
      }
      gin(1)(0, 0) += ds;
      break;
    }
    case Op::kHeadScores: {
      const Matrix& q = in(0);
      const Matrix& k = in(1);
      Matrix& gq = gin(0);
      Matrix& gk = gin(1);
      const Index heads = n.i1, blk = n.i0, rows = q.rows(), dh = q.cols() / heads;
      for (Index h = 0; h < heads; ++h) {
        for (Index r0 = 0; r0 < rows; r0 += blk) {
          const auto gs = g.block(h * rows + r0, 0, blk, blk);
          gq.block(r0, h * dh, blk, dh).noalias() += gs * k.block(r0, h * dh, blk, dh);
          gk.block(r0, h * dh, blk, dh).noalias() += gs.transpose() * q.block(r0, h * dh, blk, dh);
        }
      }
      break;
    }
    case Op::kHeadApply: {
      const Matrix& p = in(0);
      const Matrix& v = in(1);
      Matrix& gp = gin(0);
      Matrix& gv = gin(1);
      const Index heads = n.i1, blk = n.i0, rows = v.rows(), dh = v.cols() / heads;
      for (Index h = 0; h < heads; ++h) {
        for (Index r0 = 0; r0 < rows; r0 += blk) {
          const auto go = g.block(r0, h * dh, blk, dh);
          gp.block(h * rows + r0, 0, blk, blk).noalias() += go * v.block(r0, h * dh, blk, dh).transpose();
          gv.block(r0, h * dh, blk, dh).noalias() += p.block(h * rows + r0, 0, blk, blk).transpose() * go;
        }
      }
      break;
    }
  }
}

// ---- forward ops ----------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  return t.push(make_node(Op::kMatmul, {a.id, b.id}, matmul(a.value(), b.value())));
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_of(a.value()) + " x " + shape_of(b.value()) + "^T");
  }
  Matrix c = a.value() * b.value().transpose();
  return t.push(make_node(Op::kMatmulNT, {a.id, b.id}, std::move(c)));
}

Var transpose(Var a) {
  return a.tape->push(make_node(Op::kTranspose, {a.id}, a.value().transpose()));
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  return t.push(make_node(Op::kAdd, {a.id, b.id}, a.value() + b.value()));
}

Var add_n(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("add_n: no inputs");
  if (parts.size() == 1) return parts.front();
  Tape& t = *parts.front().tape;
  Tape::Node n;
  n.op = Op::kAddN;
  n.value = parts.front().value();
  n.inputs.push_back(parts.front().id);
  for (std::size_t k = 1; k < parts.size(); ++k) {
    if (parts[k].tape != &t) throw std::logic_error("vars recorded on different tapes");
    require_same_shape(n.value, parts[k].value(), "add_n");
    n.value += parts[k].value();
    n.inputs.push_back(parts[k].id);
  }
  return t.push(std::move(n));
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  return t.push(make_node(Op::kSub, {a.id, b.id}, a.value() - b.value()));
}

Var scale(Var a, double s) {
  Tape::Node n = make_node(Op::kScale, {a.id}, s * a.value());
  n.scalar = s;
  return a.tape->push(std::move(n));
}

Var scale(Var a, Var s) {
  Tape& t = same_tape(a, s);
  require_scalar(s.value(), "scale");
  return t.push(make_node(Op::kScaleBy, {a.id, s.id}, s.value()(0, 0) * a.value()));
}

Var hadamard(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "hadamard");
  return t.push(make_node(Op::kHadamard, {a.id, b.id}, a.value().cwiseProduct(b.value())));
}

Var add_row(Var a, Var row) {
  Tape& t = same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: " + shape_of(a.value()) + " + row " + shape_of(row.value()));
  }
  Matrix c = a.value().rowwise() + row.value().row(0);
  return t.push(make_node(Op::kAddRow, {a.id, row.id}, std::move(c)));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& t = *parts.front().tape;
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.tape != &t) throw std::logic_error("vars recorded on different tapes");
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row mismatch " + shape_of(parts.front().value()) + " vs " + shape_of(p.value()));
    }
    cols += p.cols();
  }
  Tape::Node n;
  n.op = Op::kConcatCols;
  n.value.resize(rows, cols);
  Index col = 0;
  for (const Var& p : parts) {
    n.value.middleCols(col, p.cols()) = p.value();
    col += p.cols();
    n.inputs.push_back(p.id);
  }
  return t.push(std::move(n));
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                     shape_of(a.value()));
  }
  Tape::Node n = make_node(Op::kSliceCols, {a.id}, a.value().middleCols(start, count));
  n.i0 = start;
  n.i1 = count;
  return a.tape->push(std::move(n));
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                     shape_of(a.value()));
  }
  Tape::Node n = make_node(Op::kSliceRows, {a.id}, a.value().middleRows(start, count));
  n.i0 = start;
  n.i1 = count;
  return a.tape->push(std::move(n));
}

Var gather_rows(Var a, std::span<const int> rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= a.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(rows[r]) + " outside " + shape_of(a.value()));
    }
    out.row(static_cast<Index>(r)) = a.value().row(rows[r]);
  }
  Tape::Node n = make_node(Op::kGatherRows, {a.id}, std::move(out));
  n.indices.assign(rows.begin(), rows.end());
  return a.tape->push(std::move(n));
}

Var embedding_lookup(Var table, std::span<const int> ids, int padding_id) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] == padding_id) {
      out.row(static_cast<Index>(r)).setZero();
    } else if (ids[r] < 0 || ids[r] >= tv.rows()) {
      throw IndexError("embedding_lookup: id " + std::to_string(ids[r]) + " outside table " + shape_of(tv));
    } else {
      out.row(static_cast<Index>(r)) = tv.row(ids[r]);
    }
  }
  Tape::Node n = make_node(Op::kEmbedding, {table.id}, std::move(out));
  n.indices.assign(ids.begin(), ids.end());
  n.i0 = padding_id;
  return table.tape->push(std::move(n));
}

Var dropout(Var a, double rate) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  Tape& t = *a.tape;
  if (rate == 0.0 || !t.training()) return a;
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix m(a.rows(), a.cols());
  const double s = 1.0 / (1.0 - rate);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = keep(t.rng()) ? s : 0.0;
  Tape::Node n = make_node(Op::kDropout, {a.id}, a.value().cwiseProduct(m));
  n.saved = std::move(m);
  return t.push(std::move(n));
}

Var softmax_rows(Var a, std::shared_ptr<const BoolMatrix> mask) {
  check_mask(a.value(), mask.get(), "softmax_rows");
  Tape::Node n = make_node(Op::kSoftmax, {a.id}, masked_softmax(a.value(), mask.get()));
  n.mask = std::move(mask);
  return a.tape->push(std::move(n));
}

Var log_softmax_rows(Var a, std::shared_ptr<const BoolMatrix> mask) {
  check_mask(a.value(), mask.get(), "log_softmax_rows");
  const Matrix z = masked_scores(a.value(), mask.get());
  const Eigen::VectorXd mx = row_max_checked(z);
  const Matrix shifted = z.colwise() - mx;
  Matrix p = shifted.array().exp().matrix();
  const Eigen::VectorXd total = p.rowwise().sum();
  p.array().colwise() /= total.array();
  Matrix y = shifted.array().colwise() - total.array().log();
  if (mask) y = mask->select(y, Matrix::Zero(y.rows(), y.cols()));
  Tape::Node n = make_node(Op::kLogSoftmax, {a.id}, std::move(y));
  n.saved = std::move(p);
  n.mask = std::move(mask);
  return a.tape->push(std::move(n));
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = same_tape(x, gain);
  const Matrix& xv = x.value();
  if (gain.rows() != 1 || gain.cols() != xv.cols() || bias.rows() != 1 || bias.cols() != xv.cols()) {
    throw ShapeError("layer_norm: input " + shape_of(xv) + ", gain " + shape_of(gain.value()) + ", bias " +
                     shape_of(bias.value()));
  }
  const auto cols = static_cast<double>(xv.cols());
  const Eigen::VectorXd mean = xv.rowwise().sum() / cols;
  Matrix xhat = xv.colwise() - mean;
  Eigen::VectorXd inv_std = (xhat.rowwise().squaredNorm() / cols).array().operator+(eps).rsqrt();
  xhat.array().colwise() *= inv_std.array();
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  Tape::Node n = make_node(Op::kLayerNorm, {x.id, gain.id, bias.id}, std::move(y));
  n.saved = std::move(xhat);
  n.saved_vec = std::move(inv_std);
  return t.push(std::move(n));
}

Var cross_entropy_rows(Var logits, std::span<const int> targets) {
  const Matrix& x = logits.value();
  if (static_cast<Index>(targets.size()) != x.rows()) {
    throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for logits " + shape_of(x));
  }
  Matrix p = masked_softmax(x, nullptr);
  double loss = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] < 0 || targets[r] >= x.cols()) {
      throw IndexError("cross_entropy_rows: target " + std::to_string(targets[r]) + " outside " +
                       std::to_string(x.cols()) + " classes");
    }
    const auto row = static_cast<Index>(r);
    const double mx = x.row(row).maxCoeff();
    const double lse = mx + std::log((x.row(row).array() - mx).exp().sum());
    loss -= x(row, targets[r]) - lse;
  }
  loss /= static_cast<double>(targets.size());
  Tape::Node n = make_node(Op::kCrossEntropy, {logits.id}, Matrix::Constant(1, 1, loss));
  n.saved = std::move(p);
  n.indices.assign(targets.begin(), targets.end());
  return logits.tape->push(std::move(n));
}

Var gelu(Var a) {
  Matrix cdf = a.value().unaryExpr([](double v) { return 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); });
  Tape::Node n = make_node(Op::kGelu, {a.id}, a.value().cwiseProduct(cdf));
  n.saved = std::move(cdf);
  return a.tape->push(std::move(n));
}

Var sigmoid(Var a) {
  Matrix y = a.value().unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  return a.tape->push(make_node(Op::kSigmoid, {a.id}, std::move(y)));
}

Var exp(Var a) { return a.tape->push(make_node(Op::kExp, {a.id}, a.value().array().exp().matrix())); }

Var sum(Var a) { return a.tape->push(make_node(Op::kSum, {a.id}, Matrix::Constant(1, 1, a.value().sum()))); }

Var weighted_sum(Var a, const Matrix& weights) {
  require_same_shape(a.value(), weights, "weighted_sum");
  Tape::Node n = make_node(Op::kWeightedSum, {a.id}, Matrix::Constant(1, 1, a.value().cwiseProduct(weights).sum()));
  n.op_a = std::make_shared<const Matrix>(weights);
  return a.tape->push(std::move(n));
}

Var l2_normalize_rows(Var a, double eps) {
  const Matrix& x = a.value();
  Eigen::VectorXd norms = (x.rowwise().squaredNorm().array() + eps * eps).sqrt();
  Matrix y = x.array().colwise() / norms.array();
  Tape::Node n = make_node(Op::kL2Normalize, {a.id}, std::move(y));
  n.saved_vec = std::move(norms);
  return a.tape->push(std::move(n));
}

Var band_mix(Var x, Var s, std::shared_ptr<const Matrix> low, std::shared_ptr<const Matrix> high,
             Eigen::Index block) {
  Tape& t = same_tape(x, s);
  require_scalar(s.value(), "band_mix");
  if (low->rows() != block || low->cols() != block || high->rows() != block || high->cols() != block ||
      x.rows() % block != 0) {
    throw ShapeError("band_mix: operators " + shape_of(*low) + "/" + shape_of(*high) + " on input " +
                     shape_of(x.value()) + " with block " + std::to_string(block));
  }
  const Matrix mix = *low + s.value()(0, 0) * (*high);
  const Matrix& xv = x.value();
  Matrix y(xv.rows(), xv.cols());
  for (Index r0 = 0; r0 < xv.rows(); r0 += block) {
    y.middleRows(r0, block).noalias() = mix * xv.middleRows(r0, block);
  }
  Tape::Node n = make_node(Op::kBandMix, {x.id, s.id}, std::move(y));
  n.op_a = std::move(low);
  n.op_b = std::move(high);
  n.i0 = block;
  return t.push(std::move(n));
}

Var head_scores(Var q, Var k, int heads, Eigen::Index block) {
  Tape& t = same_tape(q, k);
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  require_same_shape(qv, kv, "head_scores");
  if (heads <= 0 || qv.cols() % heads != 0 || block <= 0 || qv.rows() % block != 0) {
    throw ShapeError("head_scores: input " + shape_of(qv) + " with " + std::to_string(heads) + " heads, block " +
                     std::to_string(block));
  }
  const Index rows = qv.rows(), dh = qv.cols() / heads;
  Matrix s(heads * rows, block);
  for (Index h = 0; h < heads; ++h) {
    for (Index r0 = 0; r0 < rows; r0 += block) {
      s.block(h * rows + r0, 0, block, block).noalias() =
          qv.block(r0, h * dh, block, dh) * kv.block(r0, h * dh, block, dh).transpose();
    }
  }
  Tape::Node n = make_node(Op::kHeadScores, {q.id, k.id}, std::move(s));
  n.i0 = block;
  n.i1 = heads;
  return t.push(std::move(n));
}

Var head_apply(Var p, Var v, int heads, Eigen::Index block) {
  Tape& t = same_tape(p, v);
  const Matrix& pv = p.value();
  const Matrix& vv = v.value();
  if (heads <= 0 || vv.cols() % heads != 0 || pv.rows() != heads * vv.rows() || pv.cols() != block ||
      vv.rows() % block != 0) {
    throw ShapeError("head_apply: weights " + shape_of(pv) + ", values " + shape_of(vv) + " with " +
                     std::to_string(heads) + " heads");
  }
  const Index rows = vv.rows(), dh = vv.cols() / heads;
  Matrix out(rows, vv.cols());
  for (Index h = 0; h < heads; ++h) {
    for (Index r0 = 0; r0 < rows; r0 += block) {
      out.block(r0, h * dh, block, dh).noalias() =
          pv.block(h * rows + r0, 0, block, block) * vv.block(r0, h * dh, block, dh);
    }
  }
  Tape::Node n = make_node(Op::kHeadApply, {p.id, v.id}, std::move(out));
  n.i0 = block;
  n.i1 = heads;
  return t.push(std::move(n));
}

Matrix softmax_rows(const Matrix& a, const BoolMatrix* mask) {
  check_mask(a, mask, "softmax_rows");
  return masked_softmax(a, mask);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_of(a) + " x " + shape_of(b));
  Matrix c(a.rows(), b.cols());
  c.noalias() = a * b;
  return c;
}

void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) throw NumericError(what + ": non-finite entry");
}

double grad_check(const LossFn& f, std::span<Parameter* const> params, double h) {
  if (h < 1e-6 || h > 1e-4) throw std::invalid_argument("grad_check: step must lie in [1e-6, 1e-4]");
  std::vector<Matrix> saved_grads;
  saved_grads.reserve(params.size());
  for (Parameter* p : params) {
    saved_grads.push_back(p->grad);
    p->zero_grad();
  }
  {
    Tape tape;
    Var loss = f(tape);
    if (!std::isfinite(loss.scalar())) throw NumericError("grad_check: non-finite loss");
    tape.backward(loss);
  }
  auto eval = [&f]() {
    Tape tape;
    const double v = f(tape).scalar();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss under perturbation");
    return v;
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (Index i = 0; i < p.value.size(); ++i) {
      double& entry = p.value.data()[i];
      const double orig = entry;
      entry = orig + h;
      const double up = eval();
      entry = orig - h;
      const double down = eval();
      entry = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p.grad.data()[i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->grad = std::move(saved_grads[k]);
  return worst;
}

}  // namespace diff
