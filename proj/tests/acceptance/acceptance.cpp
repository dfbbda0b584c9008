// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Curves and timings are also written under the directory
// given as argv[1] (default: ./acceptance_artifacts).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "../oracles.hpp"
#include "rebasin/attention_align.hpp"
#include "rebasin/checkpoint.hpp"
#include "rebasin/cli.hpp"
#include "rebasin/demo.hpp"
#include "rebasin/lap.hpp"
#include "rebasin/toy_transformer.hpp"
#include "rebasin/transport.hpp"
#include "rebasin/weight_matching.hpp"

using namespace rebasin;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and thresholds.
constexpr double kEquivalenceTol = 1e-9;
constexpr double kEquivalenceSeconds = 60.0;
constexpr double kSpectralInvarianceTol = 1e-9;
constexpr double kSpectralControlGap = 0.1;
constexpr double kSpectralControlRate = 0.99;
constexpr double kLapSeconds = 10.0;
constexpr double kNoisyRecovery = 0.99;
constexpr double kNoiseSigma = 0.01;
constexpr double kObjectiveRelTol = 1e-6;
constexpr double kMonotoneRelTol = 1e-9;
constexpr double kMatchedMidpointBound = 0.05;
constexpr double kNaiveMidpointBound = 0.25;
constexpr double kContaminationRate = 0.99;
constexpr double kComplexityRatio = 12.0;
constexpr double kGradientRelTol = 1e-4;
constexpr double kFiniteDifferenceStep = 1e-5;

const ArchSpec kToy{2, 4, 32, 64, 8, 4, true};
constexpr std::size_t kSeqLen = 8;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

struct Outcome {
  bool pass;
  std::string detail;
};

double sum_sq_weights(const WeightSet& ws) {
  double s = 0.0;
  for (const auto& [name, m] : ws.tensors)
    if (name.ends_with(".weight")) s += frobenius_norm_squared(m);
  return s;
}

Outcome functional_equivalence() {
  const auto t0 = Clock::now();
  const auto g = build_coupling_graph(kToy, {ResidualMode::compose, false});
  std::mt19937_64 rng(101);
  double worst = 0.0;
  const int n_assignments = 100;
  for (int t = 0; t < n_assignments; ++t) {
    const WeightSet ws = init_random(kToy, 1000 + t);
    EquivalenceOptions eo;
    eo.n_samples = 1;
    eo.seq_len = kSeqLen;
    eo.tol = kEquivalenceTol;
    eo.seed = 5000 + t;
    worst = std::max(worst, verify_equivalence(ws, g, random_assignment(g, rng), eo).max_dev);
  }
  const double secs = seconds_since(t0);
  return {worst <= kEquivalenceTol && secs < kEquivalenceSeconds,
          "max_dev=" + num(worst) + " (tol " + num(kEquivalenceTol) + ") over " +
              std::to_string(n_assignments) + " assignments, " + num(secs) + " s (limit " +
              num(kEquivalenceSeconds) + " s)"};
}

Outcome spectral_invariance() {
  std::mt19937_64 rng(202);
  const std::size_t dk = 8, dm = 32;
  double worst = 0.0;
  int separated = 0;
  const int n = 500;
  for (int t = 0; t < n; ++t) {
    const Matrix h = oracle::random_matrix(dk, dm, rng);
    const Matrix moved =
        permute_cols(permute_rows(h, Permutation::random(dk, rng)), Permutation::random(dm, rng));
    worst = std::max(worst, spectral_head_distance(h, moved));
    separated += spectral_head_distance(h, oracle::random_matrix(dk, dm, rng)) > kSpectralControlGap ? 1 : 0;
  }
  const double rate = static_cast<double>(separated) / n;
  return {worst <= kSpectralInvarianceTol && rate >= kSpectralControlRate,
          "permuted max distance=" + num(worst) + " (tol " + num(kSpectralInvarianceTol) +
              "), independent control > " + num(kSpectralControlGap) + " in " + num(100 * rate) + "% of " +
              std::to_string(n)};
}

Outcome lap_exactness() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<int> small(0, 3);
  int mismatches = 0, total = 0;
  for (std::size_t n = 2; n <= 7; ++n) {
    for (int t = 0; t < 100; ++t) {
      // Continuous costs, and integer costs that produce many optimal ties.
      for (bool ties : {false, true}) {
        Matrix c = oracle::random_matrix(n, n, rng);
        if (ties)
          for (double& v : c.data()) v = small(rng);
        const auto got = solve_min(c);
        const auto want = oracle::brute_force_min(c);
        mismatches += (got.perm.indices() != want.perm || got.total != want.total) ? 1 : 0;
        ++total;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < kLapSeconds,
          std::to_string(total - mismatches) + "/" + std::to_string(total) +
              " instances match enumeration (n=2..7), " + num(secs) + " s (limit " + num(kLapSeconds) + " s)"};
}

Outcome plant_and_recover(std::ostream& log) {
  const auto g = build_coupling_graph(kToy, {ResidualMode::compose, false});
  const int seeds = 20;
  double clean_min = 1.0, noisy_min = 1.0, noisy_sum = 0.0, worst_obj = 0.0;
  log << "seed,clean_recovery,noisy_recovery,objective_rel_error\n";
  for (int s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(4000 + s);
    const WeightSet a = init_random(kToy, 400 + s);
    const auto plant = random_assignment(g, rng);
    const WeightSet b = apply_assignment(a, g, plant);
    MatchOptions mo;
    mo.seed = s;
    const auto clean = weight_match(a, b, g, mo);
    const double clean_rate = recovery_rate(g, plant, clean.assignment);
    const double rel = std::abs(clean.trace.back().objective - sum_sq_weights(b)) / sum_sq_weights(b);

    const WeightSet noisy_b = add_relative_noise(b, kNoiseSigma, rng);
    const double noisy_rate = recovery_rate(g, plant, weight_match(a, noisy_b, g, mo).assignment);
    clean_min = std::min(clean_min, clean_rate);
    noisy_min = std::min(noisy_min, noisy_rate);
    noisy_sum += noisy_rate;
    worst_obj = std::max(worst_obj, rel);
    log << s << ',' << clean_rate << ',' << noisy_rate << ',' << rel << '\n';
  }
  return {clean_min == 1.0 && noisy_min >= kNoisyRecovery && worst_obj <= kObjectiveRelTol,
          "sigma=0: min recovery " + num(100 * clean_min) + "%, objective rel err " + num(worst_obj) +
              " (tol " + num(kObjectiveRelTol) + "); sigma=" + num(kNoiseSigma) + ": min " +
              num(100 * noisy_min) + "% mean " + num(100 * noisy_sum / seeds) + "% (threshold " +
              num(100 * kNoisyRecovery) + "%) over " + std::to_string(seeds) + " seeds"};
}

Outcome monotonicity() {
  const auto g = build_coupling_graph(kToy, {ResidualMode::compose, false});
  int bad = 0;
  std::size_t sweeps = 0;
  for (int s = 0; s < 20; ++s) {
    MatchOptions mo;
    mo.seed = s;
    const auto r = weight_match(init_random(kToy, 600 + s), init_random(kToy, 700 + s), g, mo);
    sweeps += r.trace.size() - 1;
    for (std::size_t i = 1; i < r.trace.size(); ++i) {
      const double prev = r.trace[i - 1].objective;
      if (r.trace[i].objective < prev - kMonotoneRelTol * std::abs(prev)) ++bad;
    }
  }
  return {bad == 0, std::to_string(bad) + " decreasing steps over 20 independent pairs (" +
                        std::to_string(sweeps) + " sweeps total, rel tol " + num(kMonotoneRelTol) + ")"};
}

Outcome lmc_barrier(const fs::path& artifacts) {
  double worst_matched = 0.0, least_naive = 1e300;
  const int seeds = 20;
  std::ofstream summary(artifacts / "lmc_summary.csv");
  summary << "seed,matched_midpoint_excess,naive_midpoint_excess\n";
  for (int s = 0; s < seeds; ++s) {
    DemoOptions o;
    o.seed = s;
    o.noise = kNoiseSigma;
    o.verify_samples = 1;
    const auto r = run_demo(o);
    const double m = midpoint_excess(r.matched_curve), n = midpoint_excess(r.naive_curve);
    worst_matched = std::max(worst_matched, std::abs(m));
    least_naive = std::min(least_naive, n);
    summary << s << ',' << m << ',' << n << '\n';
    write_text_file_atomic(artifacts / ("lmc_matched_seed" + std::to_string(s) + ".csv"),
                           format_lmc_csv(r.matched_curve));
    write_text_file_atomic(artifacts / ("lmc_naive_seed" + std::to_string(s) + ".csv"),
                           format_lmc_csv(r.naive_curve));
  }
  return {worst_matched <= kMatchedMidpointBound && least_naive >= kNaiveMidpointBound,
          "matched |midpoint excess| max " + num(100 * worst_matched) + "% (bound " +
              num(100 * kMatchedMidpointBound) + "%), naive midpoint excess min " + num(100 * least_naive) +
              "% (bound " + num(100 * kNaiveMidpointBound) + "%) over " + std::to_string(seeds) + " seeds"};
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome transport_algebra(const fs::path& artifacts) {
  const auto g = build_coupling_graph(kToy);
  const WeightSet theta_a = init_random(kToy, 801), theta_b = init_random(kToy, 802);
  const auto assignment = weight_match(theta_a, theta_b, g).assignment;
  const auto calls = weight_match_call_count();

  std::vector<TaskVector> taus;
  std::vector<WeightSet> finetuned;
  for (int k = 0; k < 3; ++k) {
    finetuned.push_back(add(theta_a, scale(init_random(kToy, 810 + k), 0.05)));
    taus.push_back(compute_task_vector(finetuned.back(), theta_a));
  }

  // alpha = 0 leaves the base byte-identical on disk.
  const fs::path dir = artifacts / "transport";
  write_checkpoint(theta_b, dir / "base");
  const WeightSet base_disk = read_checkpoint(dir / "base");
  write_checkpoint(transport(base_disk, taus[0], assignment, g, ScalingSpec::scalar(0.0)), dir / "zero");
  const bool byte_stable = file_bytes(dir / "base" / "tensors.bin") == file_bytes(dir / "zero" / "tensors.bin") &&
                           file_bytes(dir / "base" / "manifest.json") == file_bytes(dir / "zero" / "manifest.json");

  const bool identity_exact =
      transport(theta_b, taus[0], identity_assignment(g), g, ScalingSpec::scalar(1.0)).tensors ==
      add(theta_b, retag<WeightTag>(taus[0])).tensors;

  bool commutes = true;
  for (int k = 0; k < 3; ++k) {
    commutes = commutes &&
               apply_assignment(taus[k], g, assignment).tensors ==
                   subtract(apply_assignment(finetuned[k], g, assignment), apply_assignment(theta_a, g, assignment))
                       .tensors;
  }
  std::vector<WeightSet> outputs;
  for (const auto& tau : taus) outputs.push_back(transport(theta_b, tau, assignment, g, ScalingSpec::scalar(1.0)));
  const bool distinct = outputs[0].tensors != outputs[1].tensors && outputs[1].tensors != outputs[2].tensors;
  const bool no_rematch = weight_match_call_count() == calls;

  const bool ok = byte_stable && identity_exact && commutes && distinct && no_rematch;
  auto yn = [](bool b) { return b ? "yes" : "no"; };
  return {ok, std::string("alpha=0 byte-stable: ") + yn(byte_stable) + ", identity = base + tau exactly: " +
                  yn(identity_exact) + ", pi(tau) == pi(ft) - pi(A) exactly: " + yn(commutes) +
                  ", 3 task vectors with no re-matching: " + yn(distinct && no_rematch)};
}

Outcome head_contamination(const fs::path& artifacts) {
  const auto g = build_coupling_graph(kToy);
  const fs::path dir = artifacts / "contamination";
  fs::create_directories(dir);
  std::mt19937_64 rng(909);
  int rejected = 0;
  const int models = 100;
  for (int t = 0; t < models; ++t) {
    write_checkpoint(init_random(kToy, 900 + t), dir / "model");
    PermutationAssignment pi = identity_assignment(g);
    Permutation p = Permutation::random(kToy.embed_dim, rng);
    while (as_block_permutation(p, kToy.n_heads)) p = Permutation::random(kToy.embed_dim, rng);
    pi.set(t % 2 == 0 ? "block.0.attn" : "block.1.attn", p);
    write_permutation_assignment(pi, dir / "contaminated.perm");
    const std::string model = (dir / "model").string(), perm = (dir / "contaminated.perm").string();
    const std::string seed = std::to_string(t);
    const char* argv[] = {"rebasin", "verify", "--model", model.c_str(), "--perm", perm.c_str(),
                          "--samples", "5", "--seed", seed.c_str()};
    std::ostringstream out, err;
    rejected += run_cli(10, argv, out, err) == kExitVerifyFailed ? 1 : 0;
  }
  const double rate = static_cast<double>(rejected) / models;
  return {rate >= kContaminationRate, "verify exited 4 on " + std::to_string(rejected) + "/" +
                                          std::to_string(models) + " models (threshold " +
                                          num(100 * kContaminationRate) + "%)"};
}

Outcome complexity(std::ostream& log) {
  auto measure = [&](std::size_t dm, std::size_t& sweeps) {
    const ArchSpec arch{2, 4, dm, 2 * dm, 8, 4, true};
    const auto g = build_coupling_graph(arch, {ResidualMode::compose, false});
    std::mt19937_64 rng(1001);
    const WeightSet a = init_random(arch, 1002);
    const WeightSet b = add_relative_noise(apply_assignment(a, g, random_assignment(g, rng)), kNoiseSigma, rng);
    std::vector<double> times;
    for (int rep = 0; rep < 3; ++rep) {
      const auto t0 = Clock::now();
      sweeps = weight_match(a, b, g).trace.size() - 1;
      times.push_back(seconds_since(t0));
    }
    std::sort(times.begin(), times.end());
    return times[1];
  };
  std::size_t s64 = 0, s128 = 0;
  const double t64 = measure(64, s64), t128 = measure(128, s128);
  const double ratio = t128 / t64;
  log << "d_m,median_seconds,sweeps\n64," << t64 << ',' << s64 << "\n128," << t128 << ',' << s128 << '\n';
  return {ratio <= kComplexityRatio, "d_m 64: " + num(t64) + " s (" + std::to_string(s64) + " sweeps), d_m 128: " +
                                         num(t128) + " s (" + std::to_string(s128) + " sweeps), ratio " + num(ratio) +
                                         " (bound " + num(kComplexityRatio) + ")"};
}

Outcome gradient_check() {
  const ArchSpec arch{2, 2, 8, 16, 4, 3, true};
  const WeightSet ws = init_random(arch, 1101);
  std::mt19937_64 rng(1102);
  const EvalBatch batch = random_batch(4, 5, arch.input_dim, arch.output_dim, rng);
  const auto lg = loss_and_gradient(ws, batch);
  double worst = 0.0;
  std::size_t params = 0;
  for (const auto& [name, m] : ws.tensors) {
    for (std::size_t e = 0; e < m.size(); ++e, ++params) {
      WeightSet plus = ws, minus = ws;
      plus.at(name).data()[e] += kFiniteDifferenceStep;
      minus.at(name).data()[e] -= kFiniteDifferenceStep;
      const double numeric = (loss(plus, batch) - loss(minus, batch)) / (2 * kFiniteDifferenceStep);
      const double analytic = lg.gradient.at(name).data()[e];
      worst = std::max(worst, std::abs(analytic - numeric) /
                                  std::max(std::abs(analytic) + std::abs(numeric), 1e-6));
    }
  }
  return {worst <= kGradientRelTol, "max relative error " + num(worst) + " over " + std::to_string(params) +
                                        " parameters (tol " + num(kGradientRelTol) + ")"};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path artifacts = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_artifacts");
  fs::create_directories(artifacts);
  std::ofstream recovery_log(artifacts / "plant_and_recover.csv");
  std::ofstream timing_log(artifacts / "complexity.csv");

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"functional equivalence", functional_equivalence},
      {"spectral invariance", spectral_invariance},
      {"LAP exactness", lap_exactness},
      {"plant and recover", [&] { return plant_and_recover(recovery_log); }},
      {"coordinate-descent monotonicity", monotonicity},
      {"LMC barrier reduction", [&] { return lmc_barrier(artifacts); }},
      {"transport algebra", [&] { return transport_algebra(artifacts); }},
      {"head contamination control", [&] { return head_contamination(artifacts); }},
      {"complexity sanity", [&] { return complexity(timing_log); }},
      {"gradient check", gradient_check},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("[%s] %zu. %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
