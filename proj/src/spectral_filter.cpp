#include "diff/spectral_filter.hpp"

#include <map>
#include <mutex>
#include <numeric>

namespace diff {

namespace {

void check_cutoff(Eigen::Index n, Eigen::Index c) {
  if (c < 1 || c >= n) {
    throw CutoffError("cutoff " + std::to_string(c) + " must satisfy 1 <= c < n = " + std::to_string(n));
  }
}

std::vector<Eigen::Index> index_range(Eigen::Index from, Eigen::Index to) {
  std::vector<Eigen::Index> out(static_cast<std::size_t>(to - from));
  std::iota(out.begin(), out.end(), from);
  return out;
}

}  // namespace

SpectrumSplit split_spectrum(const Matrix& x, Eigen::Index c) {
  check_cutoff(x.rows(), c);
  const ComplexMatrix spectrum = dft<double>(x);
  SpectrumSplit split;
  split.n = x.rows();
  split.c = c;
  split.lfc = spectrum.topRows(c);
  split.hfc = spectrum.bottomRows(x.rows() - c);
  return split;
}

Matrix reconstruct_low(const SpectrumSplit& split) {
  const auto rows = index_range(0, split.c);
  return idft_component<double>(split.lfc, rows, split.n);
}

Matrix reconstruct_high(const SpectrumSplit& split) {
  const auto rows = index_range(split.c, split.n);
  return idft_component<double>(split.hfc, rows, split.n);
}

BandOperators band_operators(Eigen::Index n, Eigen::Index c) {
  check_cutoff(n, c);
  static std::mutex mu;
  static std::map<std::pair<Eigen::Index, Eigen::Index>, BandOperators> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find({n, c});
  if (it != cache.end()) return it->second;
  BandOperators ops;
  ops.n = n;
  ops.c = c;
  Matrix low = low_band_operator<double>(n, c);
  ops.high = std::make_shared<const Matrix>(Matrix::Identity(n, n) - low);
  ops.low = std::make_shared<const Matrix>(std::move(low));
  cache.emplace(std::make_pair(n, c), ops);
  return ops;
}

Matrix filter_sequence(const Matrix& x, double beta, Eigen::Index c) {
  const BandOperators ops = band_operators(x.rows(), c);
  return (*ops.low + beta * (*ops.high)) * x;
}

Var filter_sequence(Var x, Var beta, const BandOperators& ops) {
  return band_mix(x, beta, ops.low, ops.high, ops.n);
}

FilterParams::FilterParams(Eigen::Index cutoff_, std::size_t streams, const std::string& prefix) : cutoff(cutoff_) {
  betas.reserve(streams);
  for (std::size_t k = 0; k < streams; ++k) {
    betas.emplace_back(prefix + ".beta" + std::to_string(k), Matrix::Constant(1, 1, kInitialBeta));
  }
}

}  // namespace diff
