#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <vector>

#include "diff/spectral_filter.hpp"
#include "doctest.h"

using diff::ComplexMatrix;
using diff::Matrix;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Direct double loop over X_k = Σ_t x_t e^{-2πikt/n} / √n.
ComplexMatrix naive_dft(const Matrix& x) {
  const Eigen::Index n = x.rows();
  ComplexMatrix out = ComplexMatrix::Zero(n, x.cols());
  for (Eigen::Index k = 0; k < n; ++k)
    for (Eigen::Index t = 0; t < n; ++t)
      for (Eigen::Index j = 0; j < x.cols(); ++j)
        out(k, j) += x(t, j) * std::polar(1.0 / std::sqrt(double(n)), -2.0 * std::numbers::pi * double(k * t) / double(n));
  return out;
}

}  // namespace

TEST_SUITE("spectral_filter") {
  TEST_CASE("dft of a constant column is pure DC") {
    Matrix x = Matrix::Constant(4, 1, 3.0);
    const ComplexMatrix s = diff::dft(x);
    CHECK(std::abs(s(0, 0) - std::complex<double>(6.0, 0.0)) < 1e-12);
    for (int k = 1; k < 4; ++k) CHECK(std::abs(s(k, 0)) < 1e-12);
  }

  TEST_CASE("dft of an impulse is flat") {
    Matrix x = Matrix::Zero(5, 1);
    x(1, 0) = 1.0;
    const ComplexMatrix s = diff::dft(x);
    for (int k = 0; k < 5; ++k) CHECK(std::abs(s(k, 0)) == doctest::Approx(1.0 / std::sqrt(5.0)));
  }

  TEST_CASE("dft matches the naive double loop") {
    Matrix x(4, 1);
    x << 1, 2, 3, 4;
    CHECK((diff::dft(x) - naive_dft(x)).cwiseAbs().maxCoeff() < 1e-12);
    std::mt19937_64 rng(11);
    const Matrix y = random_matrix(13, 5, rng);
    CHECK((diff::dft(y) - naive_dft(y)).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("DC component reconstructs the mean") {
    Matrix x(4, 1);
    x << 1, 2, 3, 4;
    const Matrix low = diff::reconstruct_low(diff::split_spectrum(x, 1));
    for (int t = 0; t < 4; ++t) CHECK(low(t, 0) == doctest::Approx(2.5));
  }

  TEST_CASE("full-spectrum idft round trip") {
    std::mt19937_64 rng(12);
    const Matrix x = random_matrix(9, 3, rng);
    std::vector<Eigen::Index> rows(9);
    for (int k = 0; k < 9; ++k) rows[static_cast<std::size_t>(k)] = k;
    const Matrix back = diff::idft_component<double>(diff::dft(x), rows, 9);
    CHECK((back - x).cwiseAbs().maxCoeff() < 1e-10);
  }

  TEST_CASE("idft rejects out-of-range spectral rows") {
    ComplexMatrix s = ComplexMatrix::Zero(1, 2);
    const std::vector<Eigen::Index> rows{7};
    CHECK_THROWS_AS(diff::idft_component<double>(s, rows, 4), diff::SpectralIndexError);
  }

  TEST_CASE("filter examples") {
    Matrix x(4, 1);
    x << 1, 2, 3, 4;
    const Matrix half = diff::filter_sequence(x, 0.5, 1);
    const double expected[] = {1.75, 2.25, 2.75, 3.25};
    for (int t = 0; t < 4; ++t) CHECK(half(t, 0) == doctest::Approx(expected[t]).epsilon(1e-12));
    std::mt19937_64 rng(13);
    const Matrix y = random_matrix(10, 4, rng);
    CHECK((diff::filter_sequence(y, 1.0, 3) - y).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((diff::filter_sequence(y, 0.0, 3) - diff::reconstruct_low(diff::split_spectrum(y, 3))).cwiseAbs().maxCoeff() < 1e-12);
    CHECK_THROWS_AS(diff::filter_sequence(y, 0.5, 10), diff::CutoffError);
    CHECK_THROWS_AS(diff::filter_sequence(y, 0.5, 0), diff::CutoffError);
  }

  TEST_CASE("band split identities on random inputs") {
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 30; ++trial) {
      const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng() % 40);
      const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 10);
      const Eigen::Index c = 1 + static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(n - 1));
      const Matrix x = random_matrix(n, d, rng);
      const diff::SpectrumSplit split = diff::split_spectrum(x, c);
      CHECK((diff::reconstruct_low(split) + diff::reconstruct_high(split) - x).cwiseAbs().maxCoeff() < 1e-10);
      const double parseval = x.squaredNorm() - split.lfc.squaredNorm() - split.hfc.squaredNorm();
      CHECK(std::abs(parseval) < 1e-9);
      const double a = 0.7, b = -1.3, beta = 0.37;
      const Matrix y = random_matrix(n, d, rng);
      const Matrix lhs = diff::filter_sequence(a * x + b * y, beta, c);
      const Matrix rhs = a * diff::filter_sequence(x, beta, c) + b * diff::filter_sequence(y, beta, c);
      CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-9);
    }
  }

  TEST_CASE("differentiable filter matches the plain one and central differences") {
    std::mt19937_64 rng(15);
    const Eigen::Index n = 7;
    const diff::BandOperators ops = diff::band_operators(n, 2);
    diff::Parameter x("x", random_matrix(3 * n, 4, rng)), beta("beta", Matrix::Constant(1, 1, 0.3));
    diff::Tape tape;
    const Matrix y = diff::filter_sequence(tape.param(x), tape.param(beta), ops).value();
    for (int block = 0; block < 3; ++block) {
      const Matrix ref = diff::filter_sequence(Matrix(x.value.middleRows(block * n, n)), 0.3, 2);
      CHECK((y.middleRows(block * n, n) - ref).cwiseAbs().maxCoeff() < 1e-12);
    }
    const Matrix w = random_matrix(3 * n, 4, rng);
    const diff::LossFn f = [&](diff::Tape& t) {
      return diff::weighted_sum(diff::filter_sequence(t.param(x), t.param(beta), ops), w);
    };
    std::vector<diff::Parameter*> params{&x, &beta};
    CHECK(diff::grad_check(f, params) < 1e-6);
  }

  TEST_CASE("filter parameters start at the documented beta") {
    const diff::FilterParams p(3, 5, "layer0.filter");
    REQUIRE(p.betas.size() == 5);
    for (const auto& b : p.betas) CHECK(b.value(0, 0) == diff::FilterParams::kInitialBeta);
  }
}
