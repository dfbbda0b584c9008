#include "rebasin/demo.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "rebasin/errors.hpp"

namespace rebasin {

namespace {

std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

}  // namespace

WeightSet add_relative_noise(const WeightSet& ws, double sigma, std::mt19937_64& rng) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw PreconditionError("noise level must be a finite non-negative number");
  }
  WeightSet out = ws;
  if (sigma == 0.0) return out;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& [name, m] : out.tensors) {
    double mean = 0.0;
    for (double v : m.data()) mean += v;
    mean /= static_cast<double>(m.size());
    double var = 0.0;
    for (double v : m.data()) var += (v - mean) * (v - mean);
    const double scale = sigma * std::sqrt(var / static_cast<double>(m.size()));
    for (double& v : m.data()) v += scale * normal(rng);
  }
  return out;
}

double recovery_rate(const CouplingGraph& g, const PermutationAssignment& planted,
                     const PermutationAssignment& found) {
  std::size_t hit = 0, total = 0;
  for (const auto* var : g.free_variables()) {
    const Permutation& p = planted.at(var->id);
    const Permutation& q = found.at(var->id);
    if (p.size() != q.size()) throw ShapeError("recovery_rate: size mismatch for " + var->id);
    for (std::size_t i = 0; i < p.size(); ++i) hit += p[i] == q[i] ? 1 : 0;
    total += p.size();
  }
  return total == 0 ? 1.0 : static_cast<double>(hit) / static_cast<double>(total);
}

double midpoint_excess(const LmcCurve& curve) {
  if (curve.losses.size() < 3) throw PreconditionError("midpoint_excess needs at least 3 points");
  const double ends = 0.5 * (curve.losses.front() + curve.losses.back());
  return (curve.losses[curve.losses.size() / 2] - ends) / ends;
}

DemoResult run_demo(const DemoOptions& opts) {
  opts.arch.validate();
  if (opts.lmc_points < 3) throw PreconditionError("demo needs at least 3 interpolation points");

  // Independent streams for each random ingredient, all derived from one seed.
  std::seed_seq seq{opts.seed, std::uint64_t{0x5eed}};
  std::vector<std::uint64_t> seeds(4);
  seq.generate(seeds.begin(), seeds.end());

  DemoResult r;
  r.batch = synthetic_task(opts.arch, opts.n_train, opts.seq_len, seeds[0]);
  r.model_a = train_toy(init_random(opts.arch, seeds[1]), r.batch, opts.train_steps, opts.lr);

  const CouplingGraph g = build_coupling_graph(opts.arch, {opts.residual_mode, false});
  std::mt19937_64 plant_rng(seeds[2]);
  r.planted = random_assignment(g, plant_rng);
  std::mt19937_64 noise_rng(seeds[3]);
  r.model_b = add_relative_noise(apply_assignment(r.model_a, g, r.planted), opts.noise, noise_rng);

  MatchOptions mo;
  mo.max_sweeps = opts.max_sweeps;
  mo.seed = opts.seed;
  mo.p_norm = opts.p_norm;
  mo.include_w0_in_intra = opts.include_w0_in_intra;
  r.match = weight_match(r.model_a, r.model_b, g, mo);
  r.recovery = recovery_rate(g, r.planted, r.match.assignment);

  EquivalenceOptions eo;
  eo.n_samples = opts.verify_samples;
  eo.tol = opts.tol;
  eo.seq_len = opts.seq_len;
  eo.seed = opts.seed;
  r.equivalence = verify_equivalence(r.model_a, g, r.match.assignment, eo);

  // Matched curve lives in B's frame, so in compose mode both endpoints use
  // the recovered skips. The naive curve is evaluated as plain models.
  const WeightSet aligned_a = apply_assignment(r.model_a, g, r.match.assignment);
  ResidualSkips skips;
  const ResidualSkips* skip_ptr = nullptr;
  if (g.mode == ResidualMode::compose) {
    skips = residual_permutations(g, r.match.assignment);
    skip_ptr = &skips;
  }
  r.matched_curve = lmc_curve(aligned_a, r.model_b, r.batch, opts.lmc_points, skip_ptr);
  r.naive_curve = lmc_curve(r.model_a, r.model_b, r.batch, opts.lmc_points);

  const double norm_sq = soblap_objective(r.model_b, r.model_b, identity_assignment(g), g);
  std::ostringstream os;
  os << "rebasin demo report\n";
  os << "seed: " << opts.seed << "\n";
  os << "arch: " << describe(opts.arch) << "\n";
  os << "residual mode: " << to_string(opts.residual_mode) << "\n";
  os << "noise sigma: " << fmt(opts.noise) << "\n";
  os << "train loss (model A): " << fmt(r.naive_curve.losses.front(), 8) << "\n";
  os << "\n[matching]\n";
  os << "converged: " << (r.match.converged ? "yes" : "no") << "\n";
  os << "sweeps: " << (r.match.trace.size() - 1) << "\n";
  os << "objective trace:\n";
  for (const auto& rec : r.match.trace) {
    os << "  " << rec.sweep << ' ' << fmt(rec.objective, 12) << ' ' << rec.changed << "\n";
  }
  os << "objective / sum ||W_B||^2: " << fmt(r.match.trace.back().objective / norm_sq, 10) << "\n";
  os << "recovery rate: " << fmt(100.0 * r.recovery, 8) << "%\n";
  os << "recovery threshold: " << fmt(100.0 * opts.recovery_threshold) << "% -> "
     << (r.recovery >= opts.recovery_threshold ? "met" : "NOT met") << "\n";
  os << "\n[equivalence]\n";
  os << "samples: " << opts.verify_samples << "\n";
  os << "max deviation: " << fmt(r.equivalence.max_dev, 6) << "\n";
  os << "tolerance: " << fmt(opts.tol) << " -> " << (r.equivalence.pass ? "pass" : "fail") << "\n";
  os << "\n[interpolation]\n";
  os << "matched endpoints: " << fmt(r.matched_curve.losses.front(), 8) << ' '
     << fmt(r.matched_curve.losses.back(), 8) << "\n";
  os << "matched midpoint: " << fmt(r.matched_curve.losses[opts.lmc_points / 2], 8)
     << " (excess " << fmt(100.0 * midpoint_excess(r.matched_curve), 6) << "%)\n";
  os << "naive endpoints: " << fmt(r.naive_curve.losses.front(), 8) << ' '
     << fmt(r.naive_curve.losses.back(), 8) << "\n";
  os << "naive midpoint: " << fmt(r.naive_curve.losses[opts.lmc_points / 2], 8) << " (excess "
     << fmt(100.0 * midpoint_excess(r.naive_curve), 6) << "%)\n";
  r.report = os.str();
  return r;
}

void write_demo_artifacts(const DemoResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_checkpoint(r.model_a, dir / "model_a");
  write_checkpoint(r.model_b, dir / "model_b");
  write_eval_batch(r.batch, dir / "batch");
  write_permutation_assignment(r.planted, dir / "planted.perm");
  write_permutation_assignment(r.match.assignment, dir / "matched.perm");
  write_text_file_atomic(dir / "trace.txt", format_trace(r.match.trace));
  write_text_file_atomic(dir / "lmc_matched.csv", format_lmc_csv(r.matched_curve));
  write_text_file_atomic(dir / "lmc_naive.csv", format_lmc_csv(r.naive_curve));
  write_text_file_atomic(dir / "report.txt", r.report);
}

}  // namespace rebasin
