#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rebasin/checkpoint.hpp"
#include "rebasin/model.hpp"
#include "rebasin/perm_graph.hpp"

namespace rebasin {

// Per-block skip permutations; null means plain identity skips.
using ResidualSkips = std::vector<ResidualPermutations>;

// Logits (N x output_dim). Per block:
//   z_attn = W_0 MHA(x) + b_0
//   z_i    = LN1(z_attn + I_i x)          (LN only when has_layernorm)
//   z_out  = LN2(W_2 ReLU(W_1 z_i + b_1) + b_2 + I_out z_i)
// then mean-pool over the sequence and a linear head. Throws NumericalError
// naming the block when an intermediate becomes non-finite.
Matrix forward(const WeightSet& ws, const std::vector<Matrix>& inputs,
               const ResidualSkips* skips = nullptr);

double cross_entropy(const Matrix& logits, const std::vector<std::size_t>& targets);
double loss(const WeightSet& ws, const EvalBatch& batch, const ResidualSkips* skips = nullptr);

struct LossAndGradient {
  double loss = 0.0;
  Gradient gradient;
};

// Mean cross-entropy and its exact gradient (identity skips).
LossAndGradient loss_and_gradient(const WeightSet& ws, const EvalBatch& batch);

// Gaussian weights with std 1/sqrt(fan_in), zero biases, unit LN gains.
WeightSet init_random(const ArchSpec& arch, std::uint64_t seed);

// Full-batch gradient descent. Throws NumericalError with the step index if
// the loss stops being finite.
WeightSet train_toy(const WeightSet& ws, const EvalBatch& batch, std::size_t steps, double lr);

// Standard-normal inputs with uniformly random labels.
EvalBatch random_batch(std::size_t n, std::size_t seq_len, std::size_t input_dim,
                       std::size_t output_dim, std::mt19937_64& rng);

// Standard-normal inputs labelled by a random linear teacher applied to the
// sequence mean, so the classes are linearly separable.
EvalBatch synthetic_task(const ArchSpec& arch, std::size_t n, std::size_t seq_len,
                         std::uint64_t seed);

struct EquivalenceOptions {
  std::size_t n_samples = 100;
  double tol = 1e-8;
  std::size_t seq_len = 8;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
};

struct EquivalenceReport {
  double max_dev = 0.0;
  bool pass = false;
};

// Compares forward(ws) with forward(pi(ws)) on random batches. In compose mode
// the permuted model runs with the skip compositions derived from `pi`.
EquivalenceReport verify_equivalence(const WeightSet& ws, const CouplingGraph& g,
                                     const PermutationAssignment& pi,
                                     const EquivalenceOptions& opts = {});

struct LmcCurve {
  std::vector<double> alphas;
  std::vector<double> losses;
};

// Loss of (1 - alpha) * left + alpha * right on an even grid of n_points >= 2.
LmcCurve lmc_curve(const WeightSet& left, const WeightSet& right, const EvalBatch& batch,
                   std::size_t n_points, const ResidualSkips* skips = nullptr);

std::string format_lmc_csv(const LmcCurve& curve);

}  // namespace rebasin
