#pragma once

#include "rebasin/linalg.hpp"
#include "rebasin/permutation.hpp"

namespace rebasin {

struct Assignment {
  Permutation perm;  // row i is assigned column perm[i]
  double total = 0.0;
};

// Exact square linear assignment. Among optimal assignments the
// lexicographically smallest permutation is returned; optimality ties are
// resolved on reduced costs within a scale-relative tolerance of a few ulps.
Assignment solve_min(const Matrix& cost);
Assignment solve_max(const Matrix& value);

}  // namespace rebasin
