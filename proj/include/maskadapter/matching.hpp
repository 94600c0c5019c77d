#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "maskadapter/common.hpp"
#include "maskadapter/masks.hpp"

namespace maskadapter {

struct MatchPair {
  int gt_index = 0;
  int pred_index = 0;
  double iou = 0.0;
};

/// Matched (gt, pred) pairs. IoU-based matches may be many-to-many; Hungarian
/// matches are one-to-one.
struct MatchSet {
  std::vector<MatchPair> pairs;

  bool empty() const { return pairs.empty(); }
  std::size_t size() const { return pairs.size(); }
};

/// All pairs whose IoU meets the threshold (inclusive). Many-to-many by
/// construction, which yields more diverse training samples than one-to-one
/// matching.
inline MatchSet iou_matcher(const BinaryMaskBatch& gt, const BinaryMaskBatch& pred,
                            double threshold) {
  if (!(threshold > 0.0) || threshold > 1.0)
    throw std::invalid_argument("iou_matcher: threshold must be in (0, 1]");
  const Matrix m = iou_matrix(gt, pred);
  MatchSet out;
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j)
      if (m.at(i, j) >= threshold) out.pairs.push_back({i, j, m.at(i, j)});
  return out;
}

namespace detail {

/// Min-cost perfect assignment on a square matrix (augmenting-path algorithm
/// with potentials, O(n^3)). Returns row -> column.
inline std::vector<int> solve_square_assignment(const Matrix& cost) {
  const int n = cost.rows;
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = std::numeric_limits<double>::infinity();
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
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
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

inline constexpr double kForbidden = 1e6;

/// Total cost over real (i < n_rows, j < n_cols) pairs of the optimal
/// assignment of `work`; +inf if the optimum uses a forbidden entry.
inline double real_assignment_cost(const Matrix& work, const Matrix& cost, int n_rows,
                                   int n_cols) {
  const std::vector<int> asg = solve_square_assignment(work);
  double total = 0.0;
  for (int i = 0; i < work.rows; ++i) {
    if (work.at(i, asg[i]) >= kForbidden / 2) return std::numeric_limits<double>::infinity();
    if (i < n_rows && asg[i] < n_cols) total += cost.at(i, asg[i]);
  }
  return total;
}

}  // namespace detail

/// Min-cost one-to-one assignment of size min(N, M) under cost 1 - IoU.
/// Among optimal assignments, returns the lexicographically smallest pair
/// list (gt index ascending, then pred index).
inline MatchSet hungarian_matcher(const BinaryMaskBatch& gt, const BinaryMaskBatch& pred) {
  const int n = gt.count, m = pred.count;
  MatchSet out;
  if (n == 0 || m == 0) return out;
  const Matrix ious = iou_matrix(gt, pred);
  Matrix cost(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) cost.at(i, j) = 1.0 - ious.at(i, j);

  // Pad to square with a constant: dummy matches add a fixed total, so the
  // optimum over real pairs is preserved.
  const int dim = std::max(n, m);
  Matrix work(dim, dim, 1.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) work.at(i, j) = cost.at(i, j);

  const double best_total = detail::real_assignment_cost(work, cost, n, m);

  // Fix pairs greedily in lexicographic order; a pair is kept only if some
  // completion still achieves the optimal total.
  std::vector<char> col_used(m, 0);
  constexpr double kTolerance = 1e-9;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      if (col_used[j]) continue;
      Matrix trial = work;
      for (int jj = 0; jj < dim; ++jj)
        if (jj != j) trial.at(i, jj) = detail::kForbidden;
      const double total = detail::real_assignment_cost(trial, cost, n, m);
      if (total <= best_total + kTolerance) {
        out.pairs.push_back({i, j, ious.at(i, j)});
        col_used[j] = 1;
        work = trial;
        break;
      }
    }
  }
  return out;
}

}  // namespace maskadapter
