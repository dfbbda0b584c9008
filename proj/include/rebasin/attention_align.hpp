#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "rebasin/assignment.hpp"
#include "rebasin/linalg.hpp"

namespace rebasin {

// Query/key/value projections of one block, (d_m out) x (d_m in).
struct AttentionWeights {
  Matrix q;
  Matrix k;
  Matrix v;
};

// Head i is rows [i * d_k, (i + 1) * d_k). Throws PreconditionError when
// rows % n_heads != 0.
std::vector<Matrix> split_heads(const Matrix& w, std::size_t n_heads);

// p-norm between descending singular-value vectors; invariant to row and
// column permutations of either head.
double spectral_head_distance(const Matrix& head_a, const Matrix& head_b, double p = 2.0);

// D[i][j]: summed q/k/v spectral distance between head i of `b` and head j of
// `a`.
Matrix inter_head_distance_matrix(const AttentionWeights& b, const AttentionWeights& a,
                                  std::size_t n_heads, double p = 2.0);

struct AlignOptions {
  double p_norm = 2.0;
  // Optional output-projection coupling for the intra-head step: A's W_0 with
  // its rows already permuted by the current P_W0, and B's W_0.
  const Matrix* out_a = nullptr;
  const Matrix* out_b = nullptr;
};

// Inter-head LAP on the spectral distance matrix, then one intra-head LAP per
// matched pair maximizing the summed q/k/v row inner products. `a` must
// already have its incoming column permutation applied.
BlockPermutation align_heads(const AttentionWeights& a, const AttentionWeights& b,
                             std::size_t n_heads, const AlignOptions& opts = {});

// Recovers the block structure of a flat permutation, or nullopt when some
// head's units are spread over several source heads.
std::optional<BlockPermutation> as_block_permutation(const Permutation& flat,
                                                     std::size_t n_heads);

struct EquivarianceReport {
  double max_abs_deviation = 0.0;
  // Largest per-head softmax-score difference between destination head i and
  // its source head; only set for block-structured permutations.
  std::optional<double> max_score_deviation;
  bool pass = false;
};

// Multi-head softmax attention O = concat_h softmax(Q_h K_h^T / sqrt(d_k)) V_h
// for X (S x d_m). Compares attention with row-permuted projections against
// the permuted reference output, O'[:, j] vs O[:, perm[j]].
EquivarianceReport verify_attention_equivariance(const AttentionWeights& w,
                                                 const Permutation& perm,
                                                 std::size_t n_heads, const Matrix& x,
                                                 double tol);

// Plain multi-head attention output (no output projection, no biases).
// `scores`, when given, receives one S x S softmax matrix per head.
Matrix multi_head_attention(const AttentionWeights& w, std::size_t n_heads, const Matrix& x,
                            std::vector<Matrix>* scores = nullptr);

}  // namespace rebasin
