#pragma once

// Independent reference implementations used by the unit and acceptance tests.
// Nothing here calls the library code it is meant to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "specgt/cube_io.hpp"

namespace oracle {

/// Feasible-set projection by exact enumeration of KKT active sets: for every
/// zero set Z and both states of the sum constraint, solve the reduced problem
/// in closed form and keep the nearest feasible candidate.
inline Eigen::VectorXd kkt_projection(const Eigen::VectorXd& v) {
  const auto d = static_cast<int>(v.size());
  Eigen::VectorXd best = Eigen::VectorXd::Zero(d);
  double best_dist = (v - best).squaredNorm();
  for (std::uint32_t mask = 0; mask < (1u << d); ++mask) {  // mask bit set = coordinate free
    int free = 0;
    double free_sum = 0.0;
    for (int i = 0; i < d; ++i) {
      if (mask & (1u << i)) {
        ++free;
        free_sum += v[i];
      }
    }
    if (free == 0) continue;
    for (int sum_active = 0; sum_active < 2; ++sum_active) {
      const double shift = sum_active ? (free_sum - 1.0) / free : 0.0;
      Eigen::VectorXd f = Eigen::VectorXd::Zero(d);
      for (int i = 0; i < d; ++i) {
        if (mask & (1u << i)) f[i] = v[i] - shift;
      }
      if (f.minCoeff() < -1e-15 || f.sum() > 1.0 + 1e-15) continue;
      const double dist = (v - f).squaredNorm();
      if (dist < best_dist) {
        best_dist = dist;
        best = f;
      }
    }
  }
  return best;
}

/// Grid minimization of ||v - f|| over feasible points of the lattice step * Z^d.
/// A full search on a lattice 20x coarser is refined level by level (spacings
/// 50, 10, 2, 1 for step 1e-3), each level scanning +-2 coarse spacings around
/// the previous optimum. The objective is a convex quadratic, so the refined
/// point is the fine-lattice optimum.
inline Eigen::VectorXd grid_projection(const Eigen::VectorXd& v, double step) {
  const auto d = static_cast<std::size_t>(v.size());
  const long units = std::lround(1.0 / step);
  std::vector<long> spacings;
  for (long s = std::max(1L, units / 20); s > 1; s = (s % 5 == 0) ? s / 5 : s / 2) spacings.push_back(s);
  spacings.push_back(1);

  std::vector<long> center(d, 0);
  for (std::size_t level = 0; level < spacings.size(); ++level) {
    const long s = spacings[level];
    std::vector<long> lo(d), hi(d);
    for (std::size_t i = 0; i < d; ++i) {
      if (level == 0) {
        lo[i] = 0;
        hi[i] = units;
      } else {
        const long window = 2 * spacings[level - 1];
        lo[i] = std::max(0L, center[i] - window);
        hi[i] = std::min(units, center[i] + window);
      }
    }
    std::vector<long> idx = lo;
    double best = std::numeric_limits<double>::infinity();
    std::vector<long> best_idx = center;
    while (true) {
      long total = 0;
      for (long x : idx) total += x;
      if (total <= units) {
        double dist = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          const double diff = v[static_cast<Eigen::Index>(i)] - static_cast<double>(idx[i]) * step;
          dist += diff * diff;
        }
        if (dist < best) {
          best = dist;
          best_idx = idx;
        }
      }
      std::size_t k = d;
      while (k > 0) {
        idx[k - 1] += s;
        if (idx[k - 1] <= hi[k - 1]) break;
        idx[k - 1] = lo[k - 1];
        --k;
      }
      if (k == 0) break;
    }
    center = best_idx;
  }
  Eigen::VectorXd f(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i) f[static_cast<Eigen::Index>(i)] = static_cast<double>(center[i]) * step;
  return f;
}

/// Central differences of a scalar function at x.
inline std::vector<double> central_diff(const std::function<double(const std::vector<double>&)>& fn,
                                        std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = fn(x);
    x[i] = keep - h;
    const double down = fn(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

/// Block-mean of a fraction map, pixel by pixel with plain loops.
inline std::vector<double> naive_block_mean(const specgt::FractionMap& fm, std::size_t factor) {
  const std::size_t rows = fm.rows() / factor, cols = fm.cols() / factor, d = fm.endmembers();
  std::vector<double> out(rows * cols * d, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      for (std::size_t k = 0; k < d; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < factor; ++i)
          for (std::size_t j = 0; j < factor; ++j) s += fm.at(r * factor + i, c * factor + j, k);
        out[(r * cols + c) * d + k] = std::max(0.0, s / static_cast<double>(factor * factor));
      }
  return out;
}

/// First index of the maximum of each d-block.
inline std::vector<std::uint8_t> naive_argmax(const std::vector<double>& values, std::size_t d) {
  std::vector<std::uint8_t> out(values.size() / d);
  for (std::size_t p = 0; p < out.size(); ++p) {
    std::size_t best = 0;
    for (std::size_t k = 0; k < d; ++k)
      if (values[p * d + k] > values[p * d + best]) best = k;
    out[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// m = E f for every pixel of a fraction map, BSQ.
inline std::vector<double> naive_render(const specgt::FractionMap& fm, const Eigen::MatrixXd& E) {
  const std::size_t n = fm.rows() * fm.cols();
  const auto bands = static_cast<std::size_t>(E.rows());
  std::vector<double> out(n * bands, 0.0);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t b = 0; b < bands; ++b) {
      double s = 0.0;
      for (std::size_t k = 0; k < fm.endmembers(); ++k)
        s += E(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k)) * fm.values()[p * fm.endmembers() + k];
      out[b * n + p] = s;
    }
  return out;
}

}  // namespace oracle
