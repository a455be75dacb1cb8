#pragma once

// Independent reference implementations used only by tests. These stay
// deliberately naive (triple loops, per-parameter finite differences) and
// must not share code with the library paths they check.

#include <cmath>
#include <functional>
#include <vector>

#include "hmtl/tensor.hpp"

namespace oracle {

// plain triple-loop matmul + bias
inline hmtl::Tensor naive_linear(const hmtl::Tensor& x, const hmtl::Tensor& W,
                                 const hmtl::Tensor& b) {
  size_t B = x.extent(0), I = x.extent(1), O = W.extent(1);
  hmtl::Tensor y({B, O});
  for (size_t r = 0; r < B; ++r)
    for (size_t o = 0; o < O; ++o) {
      double acc = b[o];
      for (size_t i = 0; i < I; ++i) acc += x.at2(r, i) * W.at2(i, o);
      y.at2(r, o) = acc;
    }
  return y;
}

inline std::vector<double> naive_segment_sum(
    const std::vector<std::vector<double>>& rows, const std::vector<int>& ids,
    int n_segments) {
  size_t d = rows.empty() ? 0 : rows[0].size();
  std::vector<double> out(static_cast<size_t>(n_segments) * d, 0.0);
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t k = 0; k < d; ++k) out[ids[r] * d + k] += rows[r][k];
  return out;
}

// central finite difference of f at x, step h
inline double central_diff(const std::function<double(double)>& f, double x,
                           double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

// central finite differences of a scalar function over a parameter vector
inline std::vector<double> fd_gradient(
    const std::function<double()>& loss, std::vector<double>& params,
    double h) {
  std::vector<double> g(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    params[i] = orig + h;
    double lp = loss();
    params[i] = orig - h;
    double lm = loss();
    params[i] = orig;
    g[i] = (lp - lm) / (2.0 * h);
  }
  return g;
}

// || a - b || / max(||a||, ||b||, floor)
inline double rel_vec_error(const std::vector<double>& a,
                            const std::vector<double>& b,
                            double floor = 1e-12) {
  double na = 0, nb = 0, nd = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    na += a[i] * a[i];
    nb += b[i] * b[i];
    double d = a[i] - b[i];
    nd += d * d;
  }
  return std::sqrt(nd) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace oracle
