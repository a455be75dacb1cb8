#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "hmtl/error.hpp"

namespace hmtl::num {

// Solves A x = b in place by Gaussian elimination with partial pivoting.
// A is k x k row-major. Columns whose best pivot falls below
// `drop_tol * max_initial_diag` are dropped: x[col] = 0 and the column index
// is appended to `dropped`. Built for the tiny (<= 20 column) normal-equation
// systems of the energy alignment.
inline std::vector<double> solve_gepp_dropping(std::vector<double> A, size_t k,
                                               std::vector<double> b,
                                               double drop_tol,
                                               std::vector<size_t>* dropped) {
  require(A.size() == k * k && b.size() == k, "solve: shape mismatch");
  double scale = 0.0;
  for (size_t i = 0; i < k; ++i) scale = std::max(scale, std::fabs(A[i * k + i]));
  if (scale == 0.0) scale = 1.0;
  const double tol = drop_tol * scale;

  std::vector<size_t> perm(k);
  for (size_t i = 0; i < k; ++i) perm[i] = i;
  std::vector<bool> is_dropped(k, false);

  for (size_t col = 0; col < k; ++col) {
    size_t best = col;
    double best_v = 0.0;
    for (size_t r = col; r < k; ++r) {
      double v = std::fabs(A[perm[r] * k + col]);
      if (v > best_v) {
        best_v = v;
        best = r;
      }
    }
    if (best_v < tol) {
      is_dropped[col] = true;
      if (dropped) dropped->push_back(col);
      continue;
    }
    std::swap(perm[col], perm[best]);
    const size_t p = perm[col];
    for (size_t r = col + 1; r < k; ++r) {
      const size_t q = perm[r];
      double f = A[q * k + col] / A[p * k + col];
      if (f == 0.0) continue;
      for (size_t c = col; c < k; ++c) A[q * k + c] -= f * A[p * k + c];
      b[q] -= f * b[p];
    }
  }

  std::vector<double> x(k, 0.0);
  for (size_t ci = k; ci-- > 0;) {
    if (is_dropped[ci]) continue;
    const size_t p = perm[ci];
    double acc = b[p];
    for (size_t c = ci + 1; c < k; ++c) acc -= A[p * k + c] * x[c];
    x[ci] = acc / A[p * k + ci];
  }
  return x;
}

}  // namespace hmtl::num
