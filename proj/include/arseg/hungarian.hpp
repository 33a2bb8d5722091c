#pragma once

#include <limits>
#include <vector>

#include "arseg/error.hpp"
#include "arseg/tensor.hpp"

namespace arseg {

/// Minimum-cost perfect assignment on a square cost matrix (Kuhn-Munkres
/// with potentials, O(n^3)). Returns assignment[row] = column.
inline std::vector<int> hungarian_min(const Mat<double>& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw InvalidInput("hungarian: cost matrix must be square");
  if (n == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based internal arrays; p[j] = row matched to column j.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assignment(n, -1);
  for (int j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  return assignment;
}

/// Maximum-weight assignment.
inline std::vector<int> hungarian_max(const Mat<double>& weight) { return hungarian_min(-weight); }

}  // namespace arseg
