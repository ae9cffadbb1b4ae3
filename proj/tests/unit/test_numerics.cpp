#include <cmath>
#include <random>
#include <vector>

#include "diff/numerics.hpp"
#include "doctest.h"

using diff::Matrix;
using diff::Parameter;
using diff::Tape;
using diff::Var;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace

TEST_SUITE("numerics") {
  TEST_CASE("matmul hand values and identity") {
    Matrix a(2, 2);
    a << 1, 2, 3, 4;
    Matrix ones = Matrix::Ones(2, 1);
    const Matrix p = diff::matmul(a, ones);
    CHECK(p(0, 0) == 3.0);
    CHECK(p(1, 0) == 7.0);
    std::mt19937_64 rng(1);
    const Matrix m = random_matrix(3, 5, rng);
    CHECK(diff::matmul(Matrix::Identity(3, 3), m) == m);
  }

  TEST_CASE("matmul shape error names both shapes") {
    Matrix a(2, 3), b(2, 2);
    try {
      diff::matmul(a, b);
      FAIL("expected ShapeError");
    } catch (const diff::ShapeError& e) {
      const std::string what = e.what();
      CHECK(what.find("2x3") != std::string::npos);
      CHECK(what.find("2x2") != std::string::npos);
    }
  }

  TEST_CASE("softmax examples") {
    Matrix z = Matrix::Zero(1, 2);
    CHECK(diff::softmax_rows(z)(0, 0) == doctest::Approx(0.5));
    Matrix z3 = Matrix::Zero(1, 3);
    diff::BoolMatrix mask(1, 3);
    mask << true, true, false;
    const Matrix s = diff::softmax_rows(z3, &mask);
    CHECK(s(0, 0) == doctest::Approx(0.5));
    CHECK(s(0, 2) == 0.0);
    Matrix x(1, 3);
    x << 1, 2, 3;
    const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    const Matrix sx = diff::softmax_rows(x);
    for (int j = 0; j < 3; ++j) CHECK(sx(0, j) == doctest::Approx(std::exp(j + 1.0) / denom).epsilon(1e-14));
  }

  TEST_CASE("softmax is shift invariant, sums to one and rejects fully masked rows") {
    std::mt19937_64 rng(2);
    const Matrix x = random_matrix(6, 9, rng) * 30.0;
    const Matrix s = diff::softmax_rows(x);
    const Matrix shifted = diff::softmax_rows((x.array() + 1234.5).matrix());
    CHECK((s - shifted).cwiseAbs().maxCoeff() < 1e-12);
    for (Eigen::Index i = 0; i < s.rows(); ++i) CHECK(std::abs(s.row(i).sum() - 1.0) < 1e-12);
    diff::BoolMatrix none = diff::BoolMatrix::Constant(6, 9, false);
    CHECK_THROWS_AS(diff::softmax_rows(x, &none), diff::DegenerateRowError);
  }

  TEST_CASE("layer norm examples") {
    Tape tape;
    Parameter gain("g", Matrix::Ones(1, 2)), bias("b", Matrix::Zero(1, 2));
    Matrix x(2, 2);
    x << 1, 3, 7, 7;
    const Matrix y = diff::layer_norm(tape.constant(x), tape.param(gain), tape.param(bias), 1e-15).value();
    CHECK(y(0, 0) == doctest::Approx(-1.0));
    CHECK(y(0, 1) == doctest::Approx(1.0));
    CHECK(y(1, 0) == 0.0);
    CHECK(y(1, 1) == 0.0);
  }

  TEST_CASE("cross entropy examples") {
    Tape tape;
    const std::vector<int> target{2};
    CHECK(diff::cross_entropy_rows(tape.constant(Matrix::Zero(1, 4)), target).scalar() == doctest::Approx(std::log(4.0)));
    Matrix confident = Matrix::Zero(1, 4);
    confident(0, 2) = 100.0;
    CHECK(diff::cross_entropy_rows(tape.constant(confident), target).scalar() < 1e-40);
    const std::vector<int> bad{4};
    CHECK_THROWS_AS(diff::cross_entropy_rows(tape.constant(confident), bad), diff::IndexError);
  }

  TEST_CASE("elementwise suite") {
    std::mt19937_64 rng(3);
    Tape tape;
    const Matrix m = random_matrix(3, 4, rng);
    CHECK(diff::add(tape.constant(m), tape.constant(Matrix::Zero(3, 4))).value() == m);
    CHECK_THROWS_AS(diff::add(tape.constant(m), tape.constant(Matrix::Zero(4, 3))), diff::ShapeError);
    const Var t = diff::transpose(tape.constant(m));
    CHECK(t.value() == m.transpose());
  }

  TEST_CASE("repeated embedding index accumulates gradient") {
    Tape tape;
    Parameter table("t", Matrix::Ones(4, 3));
    table.zero_grad();
    const std::vector<int> ids{2, 2};
    const Var rows = diff::embedding_lookup(tape.param(table), ids);
    tape.backward(diff::sum(rows));
    CHECK(table.grad.row(2) == Matrix::Constant(1, 3, 2.0));
    CHECK(table.grad.row(1).isZero());
  }

  TEST_CASE("padding id yields zero rows and no gradient") {
    Tape tape;
    Parameter table("t", Matrix::Ones(4, 3));
    table.zero_grad();
    const std::vector<int> ids{0, 1};
    const Var rows = diff::embedding_lookup(tape.param(table), ids, 0);
    CHECK(rows.value().row(0).isZero());
    tape.backward(diff::sum(rows));
    CHECK(table.grad.row(0).isZero());
  }

  TEST_CASE("dropout is seeded and inverted") {
    std::mt19937_64 rng(4);
    const Matrix x = random_matrix(20, 20, rng);
    Tape a(true, 77), b(true, 77);
    const Matrix da = diff::dropout(a.constant(x), 0.5).value();
    const Matrix db = diff::dropout(b.constant(x), 0.5).value();
    CHECK(da == db);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double v = da.data()[i];
      CHECK((v == 0.0 || std::abs(v - 2.0 * x.data()[i]) < 1e-15));
    }
    Tape eval;
    CHECK(diff::dropout(eval.constant(x), 0.5).value() == x);
  }

  TEST_CASE("grad_check on known functions") {
    Parameter p("p", Matrix::Constant(2, 2, 0.3));
    const diff::LossFn linear = [&](Tape& t) { return diff::sum(t.param(p)); };
    std::vector<Parameter*> params{&p};
    CHECK(diff::grad_check(linear, params) < 1e-8);
    const diff::LossFn quad = [&](Tape& t) {
      const Var v = t.param(p);
      return diff::sum(diff::hadamard(v, v));
    };
    CHECK(diff::grad_check(quad, params) < 1e-8);
    const diff::LossFn bad = [&](Tape& t) { return diff::scale(diff::sum(t.param(p)), INFINITY); };
    CHECK_THROWS_AS(diff::grad_check(bad, params), diff::NumericError);
  }

  TEST_CASE("every op matches central differences") {
    std::mt19937_64 rng(5);
    Parameter a("a", random_matrix(4, 3, rng)), b("b", random_matrix(3, 4, rng)), c("c", random_matrix(4, 3, rng));
    Parameter row("row", random_matrix(1, 3, rng)), s("s", Matrix::Constant(1, 1, 0.7));
    Parameter gain("g", random_matrix(1, 3, rng)), bias("bias", random_matrix(1, 3, rng));
    std::vector<Parameter*> params{&a, &b, &c, &row, &s, &gain, &bias};
    const Matrix w = random_matrix(4, 4, rng);
    diff::BoolMatrix mask = diff::BoolMatrix::Constant(4, 4, true);
    mask(0, 3) = mask(1, 2) = false;
    auto shared_mask = std::make_shared<const diff::BoolMatrix>(mask);
    const std::vector<int> gather{3, 0, 0, 2};
    const std::vector<int> targets{0, 3, 1, 2};
    const diff::LossFn f = [&](Tape& t) {
      const Var va = t.param(a), vb = t.param(b), vc = t.param(c);
      const Var prod = diff::matmul(va, vb);
      const Var nt = diff::matmul_nt(diff::sigmoid(va), vc);
      const Var mixed = diff::add(prod, diff::scale(nt, t.param(s)));
      const Var soft = diff::softmax_rows(mixed, shared_mask);
      const Var logsoft = diff::log_softmax_rows(mixed, shared_mask);
      const Var normed = diff::layer_norm(diff::add_row(vc, t.param(row)), t.param(gain), t.param(bias), 1e-5);
      const std::vector<Var> parts{diff::gelu(normed), diff::exp(diff::scale(va, 0.1))};
      const Var cat = diff::concat_cols(parts);
      const Var picked = diff::gather_rows(diff::slice_cols(cat, 1, 4), gather);
      const Var unit = diff::l2_normalize_rows(diff::sub(va, vc));
      const std::vector<Var> addends{unit, vc, va};
      Var loss = diff::add(diff::weighted_sum(logsoft, w), diff::weighted_sum(soft, w));
      loss = diff::add(loss, diff::sum(diff::hadamard(picked, picked)));
      loss = diff::add(loss, diff::sum(diff::hadamard(diff::add_n(addends), diff::transpose(vb))));
      loss = diff::add(loss, diff::cross_entropy_rows(mixed, targets));
      loss = diff::add(loss, diff::sum(diff::slice_rows(diff::transpose(prod), 1, 2)));
      return loss;
    };
    CHECK(diff::grad_check(f, params) < 1e-6);
  }
}
