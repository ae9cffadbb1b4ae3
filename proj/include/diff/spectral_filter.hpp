#pragma once

#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "diff/numerics.hpp"

namespace diff {

/// Unitary DFT matrix: F(k, t) = exp(-2πi·k·t / n) / √n.
template <typename Scalar>
ComplexMatrixX<Scalar> dft_matrix(Eigen::Index n) {
  using C = std::complex<Scalar>;
  ComplexMatrixX<Scalar> f(n, n);
  const Scalar norm = Scalar(1) / std::sqrt(static_cast<Scalar>(n));
  for (Eigen::Index k = 0; k < n; ++k) {
    for (Eigen::Index t = 0; t < n; ++t) {
      // reduce k·t mod n first so large n keeps full phase precision
      const Scalar angle = -Scalar(2) * std::numbers::pi_v<Scalar> * static_cast<Scalar>((k * t) % n) /
                           static_cast<Scalar>(n);
      f(k, t) = C(std::cos(angle), std::sin(angle)) * norm;
    }
  }
  return f;
}

/// Column-wise unitary DFT of a real sequence matrix [n×d].
template <typename Scalar>
ComplexMatrixX<Scalar> dft(const MatrixX<Scalar>& x) {
  if (x.rows() < 1) throw ShapeError("dft: empty sequence");
  return dft_matrix<Scalar>(x.rows()) * x.template cast<std::complex<Scalar>>();
}

/// Applies the conjugate DFT rows named by `spectral_rows` to a partial spectrum and
/// keeps the real part. Output always has n rows.
template <typename Scalar>
MatrixX<Scalar> idft_component(const ComplexMatrixX<Scalar>& s, std::span<const Eigen::Index> spectral_rows,
                               Eigen::Index n) {
  if (static_cast<Eigen::Index>(spectral_rows.size()) != s.rows()) {
    throw SpectralIndexError("idft_component: " + std::to_string(spectral_rows.size()) + " indices for " +
                             std::to_string(s.rows()) + " spectral rows");
  }
  const ComplexMatrixX<Scalar> f = dft_matrix<Scalar>(n);
  ComplexMatrixX<Scalar> basis(n, s.rows());
  for (Eigen::Index j = 0; j < s.rows(); ++j) {
    const Eigen::Index k = spectral_rows[static_cast<std::size_t>(j)];
    if (k < 0 || k >= n) {
      throw SpectralIndexError("idft_component: spectral row " + std::to_string(k) + " outside [0, " +
                               std::to_string(n) + ")");
    }
    basis.col(j) = f.row(k).adjoint();
  }
  return (basis * s).real();
}

/// Low band = first c spectral rows, high band = the remaining n − c.
struct SpectrumSplit {
  Eigen::Index n = 0;
  Eigen::Index c = 0;
  ComplexMatrix lfc;
  ComplexMatrix hfc;
};

SpectrumSplit split_spectrum(const Matrix& x, Eigen::Index c);
Matrix reconstruct_low(const SpectrumSplit& split);
Matrix reconstruct_high(const SpectrumSplit& split);

/// Real band operators for length n and cutoff c, so that low·x and high·x are the
/// real parts of the reconstructed low/high components, and low + high = I.
struct BandOperators {
  Eigen::Index n = 0;
  Eigen::Index c = 0;
  std::shared_ptr<const Matrix> low;
  std::shared_ptr<const Matrix> high;
};

template <typename Scalar>
MatrixX<Scalar> low_band_operator(Eigen::Index n, Eigen::Index c) {
  const ComplexMatrixX<Scalar> f = dft_matrix<Scalar>(n);
  return (f.topRows(c).adjoint() * f.topRows(c)).real();
}

/// Memoized per (n, c); throws CutoffError unless 1 ≤ c < n.
BandOperators band_operators(Eigen::Index n, Eigen::Index c);

/// Non-differentiable filter: low·x + beta·high·x.
Matrix filter_sequence(const Matrix& x, double beta, Eigen::Index c);

/// Differentiable filter over a stack of sequences, each ops.n rows tall.
Var filter_sequence(Var x, Var beta, const BandOperators& ops);

/// One trainable β per filtered stream.
struct FilterParams {
  static constexpr double kInitialBeta = 0.1;

  FilterParams() = default;
  FilterParams(Eigen::Index cutoff, std::size_t streams, const std::string& prefix);

  Eigen::Index cutoff = 0;
  std::vector<Parameter> betas;
};

}  // namespace diff
