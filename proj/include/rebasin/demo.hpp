#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rebasin/assignment.hpp"
#include "rebasin/checkpoint.hpp"
#include "rebasin/model.hpp"
#include "rebasin/perm_graph.hpp"
#include "rebasin/toy_transformer.hpp"
#include "rebasin/weight_matching.hpp"

namespace rebasin {

// Adds N(0, (sigma * std(t))^2) to every entry of each tensor t, where std(t)
// is the population standard deviation of that tensor.
WeightSet add_relative_noise(const WeightSet& ws, double sigma, std::mt19937_64& rng);

// Fraction of indices where `found` agrees with `planted`, pooled over the
// graph's free variables. Attention variables are compared on their flat form.
double recovery_rate(const CouplingGraph& g, const PermutationAssignment& planted,
                     const PermutationAssignment& found);

// Loss at the middle grid point relative to the mean of the two endpoints:
// (mid - mean) / mean.
double midpoint_excess(const LmcCurve& curve);

struct DemoOptions {
  ArchSpec arch{2, 4, 32, 64, 8, 4, true};
  std::uint64_t seed = 0;
  double noise = 0.01;
  ResidualMode residual_mode = ResidualMode::tie;
  std::size_t seq_len = 8;
  std::size_t n_train = 32;
  std::size_t train_steps = 100;
  double lr = 0.1;
  std::size_t max_sweeps = 50;
  double p_norm = 2.0;
  bool include_w0_in_intra = false;
  std::size_t lmc_points = 11;
  std::size_t verify_samples = 20;
  double tol = 1e-8;
  double recovery_threshold = 0.99;
};

struct DemoResult {
  WeightSet model_a;
  WeightSet model_b;
  EvalBatch batch;
  PermutationAssignment planted;
  MatchResult match;
  double recovery = 0.0;
  EquivalenceReport equivalence;
  LmcCurve matched_curve;
  LmcCurve naive_curve;
  std::string report;
};

// Trains a toy model, plants a random structured permutation plus noise,
// matches it back and evaluates equivalence and both interpolation curves.
// The planted assignment also moves the embedding-side stream permutation.
DemoResult run_demo(const DemoOptions& opts);

// Writes model_a/, model_b/, batch/, planted.perm, matched.perm, trace.txt,
// lmc_matched.csv, lmc_naive.csv and report.txt under `dir`.
void write_demo_artifacts(const DemoResult& r, const std::filesystem::path& dir);

}  // namespace rebasin
