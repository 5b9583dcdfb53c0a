#pragma once

#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Dense>

#include "ctxmem/common.hpp"
#include "ctxmem/tensor_io.hpp"

namespace ctxmem {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) with 53 random bits; portable across standard libraries.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double normal01(Rng& rng) {
  double u1 = uniform01(rng);
  double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

inline Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal01(rng);
  return m;
}

/// Row-wise log-softmax; -inf logits are allowed as long as each row has a finite entry.
inline Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

inline Matrix softmax_rows(const Matrix& logits) { return log_softmax_rows(logits).array().exp(); }

inline NamedArray to_named_array(const Matrix& m) {
  NamedArray a;
  a.shape = {m.rows(), m.cols()};
  a.data.assign(m.data(), m.data() + m.size());
  return a;
}

inline Matrix from_named_array(const NamedArray& a, const std::string& name) {
  if (a.shape.size() != 2) throw Error("array '" + name + "' is not two-dimensional");
  Matrix m(a.shape[0], a.shape[1]);
  if (static_cast<std::size_t>(m.size()) != a.data.size())
    throw Error("array '" + name + "' has inconsistent data length");
  std::copy(a.data.begin(), a.data.end(), m.data());
  return m;
}

}  // namespace ctxmem
