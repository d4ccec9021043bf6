#include "qdetr/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace qdetr {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Jonker-Volgenant shortest augmenting path on a square matrix (1-indexed
// internally). Returns the optimal total; fills row_of_col.
double solve_square(const std::vector<double>& a, int s, std::vector<int>& row_of_col) {
  std::vector<double> u(static_cast<std::size_t>(s) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(s) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(s) + 1, 0);
  std::vector<int> way(static_cast<std::size_t>(s) + 1, 0);

  for (int i = 1; i <= s; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(s) + 1, kInf);
    std::vector<char> used(static_cast<std::size_t>(s) + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = -1;
      for (int j = 1; j <= s; ++j) {
        if (used[j]) continue;
        const double cur = a[static_cast<std::size_t>(i0 - 1) * s + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= s; ++j) {
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

  double total = 0.0;
  row_of_col.assign(static_cast<std::size_t>(s), -1);
  for (int j = 1; j <= s; ++j) {
    row_of_col[static_cast<std::size_t>(j - 1)] = p[j] - 1;
    total += a[static_cast<std::size_t>(p[j] - 1) * s + (j - 1)];
  }
  return total;
}

// Optimal total over free rows x free columns of the padded matrix.
double solve_sub(const std::vector<double>& a, int s, const std::vector<int>& rows,
                 const std::vector<int>& cols) {
  const int k = static_cast<int>(rows.size());
  if (k == 0) return 0.0;
  std::vector<double> sub(static_cast<std::size_t>(k) * k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j)
      sub[static_cast<std::size_t>(i) * k + j] = a[static_cast<std::size_t>(rows[i]) * s + cols[j]];
  std::vector<int> dummy;
  return solve_square(sub, k, dummy);
}

}  // namespace

MatchPlan hungarian(const Tensor& cost) {
  if (cost.ndim() != 2) throw dim_error("hungarian: cost must be 2-D, got " + shape_str(cost.shape));
  const int n = cost.rows(), m = cost.cols();
  MatchPlan plan;
  if (n == 0 || m == 0) {
    for (int i = 0; i < n; ++i) plan.unmatched_predictions.push_back(i);
    return plan;
  }
  for (std::size_t i = 0; i < cost.numel(); ++i) {
    if (!std::isfinite(cost.data()[i])) throw contract_error("hungarian: non-finite cost");
  }

  const int s = std::max(n, m);
  std::vector<double> a(static_cast<std::size_t>(s) * s, 0.0);  // pad with 0
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      a[static_cast<std::size_t>(i) * s + j] = static_cast<double>(cost.data()[static_cast<std::size_t>(i) * m + j]);

  std::vector<int> row_of_col;
  const double best = solve_square(a, s, row_of_col);
  const double tol = 1e-9 * std::max(1.0, std::abs(best));

  // Fix rows in order to the smallest column that keeps the total optimal;
  // "unmatched" (a padding column) is considered after every real column.
  std::vector<int> free_cols(static_cast<std::size_t>(s));
  for (int j = 0; j < s; ++j) free_cols[static_cast<std::size_t>(j)] = j;
  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  double fixed_cost = 0.0;

  for (int i = 0; i < n; ++i) {
    std::vector<int> rest_rows;
    for (int r = i + 1; r < s; ++r) rest_rows.push_back(r);

    int chosen = -1;
    for (std::size_t ci = 0; ci < free_cols.size(); ++ci) {
      const int c = free_cols[ci];
      if (c >= m && chosen == -2) continue;  // any padding column is equivalent
      std::vector<int> rest_cols;
      for (std::size_t cj = 0; cj < free_cols.size(); ++cj)
        if (cj != ci) rest_cols.push_back(free_cols[cj]);
      const double total =
          fixed_cost + a[static_cast<std::size_t>(i) * s + c] + solve_sub(a, s, rest_rows, rest_cols);
      if (total <= best + tol) {
        chosen = c;
        break;
      }
      if (c >= m) chosen = -2;  // padding failed once: no need to retry padding
    }
    if (chosen < 0) {
      // Cannot happen for a consistent optimum; fall back to the base solve.
      throw contract_error("hungarian: canonicalization failed");
    }
    assign[static_cast<std::size_t>(i)] = chosen;
    fixed_cost += a[static_cast<std::size_t>(i) * s + chosen];
    free_cols.erase(std::find(free_cols.begin(), free_cols.end(), chosen));
  }

  for (int i = 0; i < n; ++i) {
    if (assign[static_cast<std::size_t>(i)] < m) {
      plan.pairs.emplace_back(i, assign[static_cast<std::size_t>(i)]);
    } else {
      plan.unmatched_predictions.push_back(i);
    }
  }
  return plan;
}

}  // namespace qdetr
