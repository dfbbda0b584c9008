#include "rebasin/lap.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <string>
#include <vector>

#include "rebasin/errors.hpp"

namespace rebasin {

namespace {

struct DualSolution {
  std::vector<std::size_t> row_to_col;
  std::vector<double> u;  // row potentials
  std::vector<double> v;  // column potentials
};

// Shortest augmenting path with potentials (Jonker-Volgenant style
// Hungarian), O(n^3). Reduced costs c[i][j] - u[i] - v[j] are >= 0 and zero on
// the returned matching.
DualSolution shortest_augmenting_path(const Matrix& c) {
  const std::size_t n = c.rows();
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based with a virtual column 0, as in the classic formulation.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  DualSolution out;
  out.row_to_col.assign(n, 0);
  out.u.assign(u.begin() + 1, u.end());
  out.v.assign(v.begin() + 1, v.end());
  for (std::size_t j = 1; j <= n; ++j) out.row_to_col[match[j] - 1] = j - 1;
  return out;
}

// Every optimal assignment uses only tight edges of an optimal dual, so the
// lexicographically smallest optimum is the lexicographically smallest
// perfect matching of the tight subgraph. Rows are fixed in order; a cheaper
// column j for row i is accepted iff an alternating path over unfixed rows
// frees the column row i currently holds.
std::vector<std::size_t> lexicographic_refine(const Matrix& c,
                                              const DualSolution& dual,
                                              double tight_tol) {
  const std::size_t n = c.rows();
  std::vector<std::vector<char>> tight(n, std::vector<char>(n, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      tight[i][j] = (c(i, j) - dual.u[i] - dual.v[j]) <= tight_tol;

  std::vector<std::size_t> row_to_col = dual.row_to_col;
  std::vector<std::size_t> col_to_row(n);
  for (std::size_t i = 0; i < n; ++i) col_to_row[row_to_col[i]] = i;

  std::vector<std::size_t> parent_row(n);
  std::vector<char> visited(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t held = row_to_col[i];
    for (std::size_t j = 0; j < held; ++j) {
      if (!tight[i][j]) continue;
      const std::size_t k = col_to_row[j];
      if (k < i) continue;  // column owned by a fixed row
      // BFS over rows > i: from row r we may move to any tight column, whose
      // owner must then be re-seated. Goal: reach column `held`.
      std::fill(visited.begin(), visited.end(), 0);
      std::deque<std::size_t> queue{k};
      visited[k] = 1;
      std::size_t goal_row = n;
      while (!queue.empty() && goal_row == n) {
        const std::size_t r = queue.front();
        queue.pop_front();
        for (std::size_t col = 0; col < n; ++col) {
          if (!tight[r][col] || col == row_to_col[r]) continue;
          if (col == held) {
            parent_row[col] = r;
            goal_row = r;
            break;
          }
          const std::size_t owner = col_to_row[col];
          if (owner <= i || visited[owner]) continue;
          visited[owner] = 1;
          parent_row[col] = r;
          queue.push_back(owner);
        }
      }
      if (goal_row == n) continue;
      // Walk back from `held`: each row on the path takes the column it
      // reached, releasing its previous column to its predecessor.
      std::size_t col = held;
      while (true) {
        const std::size_t r = parent_row[col];
        const std::size_t prev = row_to_col[r];
        row_to_col[r] = col;
        col_to_row[col] = r;
        if (r == k) break;
        col = prev;
      }
      row_to_col[i] = j;
      col_to_row[j] = i;
      break;
    }
  }
  return row_to_col;
}

void require_valid(const Matrix& c) {
  if (c.rows() != c.cols()) {
    throw ShapeError("assignment matrix must be square, got " +
                     std::to_string(c.rows()) + "x" + std::to_string(c.cols()));
  }
  if (c.rows() == 0) throw PreconditionError("assignment matrix is empty");
  if (!c.all_finite()) throw NonFiniteError("assignment matrix has non-finite entries");
}

}  // namespace

Assignment solve_min(const Matrix& cost) {
  require_valid(cost);
  const std::size_t n = cost.rows();
  double scale = 1.0;
  for (double x : cost.data()) scale = std::max(scale, std::abs(x));
  const double tight_tol =
      64.0 * static_cast<double>(n) * std::numeric_limits<double>::epsilon() * scale;

  const DualSolution dual = shortest_augmenting_path(cost);
  std::vector<std::size_t> best = lexicographic_refine(cost, dual, tight_tol);

  Assignment out{Permutation(std::move(best)), 0.0};
  for (std::size_t i = 0; i < n; ++i) out.total += cost(i, out.perm[i]);
  return out;
}

Assignment solve_max(const Matrix& value) {
  Matrix negated = -1.0 * value;
  Assignment a = solve_min(negated);
  a.total = 0.0;
  for (std::size_t i = 0; i < value.rows(); ++i) a.total += value(i, a.perm[i]);
  return a;
}

}  // namespace rebasin
