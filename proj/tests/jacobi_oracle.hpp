#pragma once

// Independent singular values for cross-checking: one-sided (Hestenes)
// Jacobi rotations on the columns of a plain row-major copy. Shares no code
// with Eigen's decompositions.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

inline std::vector<double> jacobi_singular_values(std::vector<double> a, int rows, int cols) {
  // Work on the wider orientation's transpose so columns <= rows.
  if (cols > rows) {
    std::vector<double> t(a.size());
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
    a.swap(t);
    std::swap(rows, cols);
  }
  auto at = [&](int r, int c) -> double& { return a[r * cols + c]; };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < cols - 1; ++p) {
      for (int q = p + 1; q < cols; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (int r = 0; r < rows; ++r) {
          alpha += at(r, p) * at(r, p);
          beta += at(r, q) * at(r, q);
          gamma += at(r, p) * at(r, q);
        }
        if (gamma == 0.0) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (int r = 0; r < rows; ++r) {
          const double x = at(r, p);
          const double y = at(r, q);
          at(r, p) = c * x - s * y;
          at(r, q) = s * x + c * y;
        }
      }
    }
    if (off < 1e-15) break;
  }
  std::vector<double> sv(cols);
  for (int c = 0; c < cols; ++c) {
    double n = 0.0;
    for (int r = 0; r < rows; ++r) n += at(r, c) * at(r, c);
    sv[c] = std::sqrt(n);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

}  // namespace oracle
