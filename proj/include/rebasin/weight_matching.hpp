#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rebasin/assignment.hpp"
#include "rebasin/model.hpp"
#include "rebasin/perm_graph.hpp"

namespace rebasin {

struct MatchOptions {
  std::size_t max_sweeps = 50;
  std::uint64_t seed = 0;  // variable visiting order
  double p_norm = 2.0;     // spectral head distance
  bool include_w0_in_intra = false;
  // Starting point; identity when absent. Pinned variables keep these values.
  std::optional<PermutationAssignment> initial;
};

struct SweepRecord {
  std::size_t sweep = 0;  // 0 is the starting assignment
  double objective = 0.0;
  std::size_t changed = 0;
};

struct MatchResult {
  PermutationAssignment assignment;
  std::vector<SweepRecord> trace;
  bool converged = false;
};

// Sum over every weight matrix of <W_B, pi(W_A)>. Biases and LayerNorm vectors
// do not contribute.
double soblap_objective(const WeightSet& a, const WeightSet& b, const PermutationAssignment& pi,
                        const CouplingGraph& g);

// Best permutation for one non-attention variable with all others fixed: the
// value matrix sums B_t A_t'^T over tensors whose rows it permutes and
// B_t^T A_t' over tensors whose columns it permutes, where A_t' has its other
// axis permuted by the current assignment.
Permutation solve_mlp_variable(const std::string& variable, const WeightSet& a,
                               const WeightSet& b, const PermutationAssignment& current,
                               const CouplingGraph& g);

// Coordinate descent over the free variables of `g`. Attention variables go
// through align_heads with A's q/k/v columns pre-permuted by the block's
// incoming permutation. A coordinate update is kept only when it strictly
// raises the objective terms that involve that variable, so the trace never
// decreases. Stops after a sweep that changes nothing, or at max_sweeps.
MatchResult weight_match(const WeightSet& a, const WeightSet& b, const CouplingGraph& g,
                         const MatchOptions& opts = {});

// Number of weight_match invocations in this process.
std::uint64_t weight_match_call_count();

// "sweep objective changed" lines.
std::string format_trace(const std::vector<SweepRecord>& trace);

}  // namespace rebasin
