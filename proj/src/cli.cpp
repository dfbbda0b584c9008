#include "rebasin/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include "rebasin/checkpoint.hpp"
#include "rebasin/demo.hpp"
#include "rebasin/errors.hpp"
#include "rebasin/perm_graph.hpp"
#include "rebasin/toy_transformer.hpp"
#include "rebasin/transport.hpp"
#include "rebasin/weight_matching.hpp"

namespace rebasin {

namespace {

namespace fs = std::filesystem;

struct Flags {
  std::string model_a, model_b, model, base, finetuned, task_vector, perm, out, batch;
  std::string trace, dump_graph, alpha_file;
  std::optional<double> alpha;
  std::size_t max_sweeps = 50;
  std::uint64_t seed = 0;
  double tol = 1e-8;
  double p_norm = 2.0;
  std::string residual_mode = "compose";
  bool mode_given = false;
  bool include_w0_intra = false;
  bool unpin_embedding = false;
  std::size_t points = 11;
  std::size_t samples = 100;

  // demo only
  double noise = 0.01;
  std::size_t train_steps = 100;
  ArchSpec arch = DemoOptions{}.arch;
  bool no_layernorm = false;
  std::optional<std::string> demo_mode;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

CouplingGraph graph_for(const ArchSpec& arch, const Flags& f) {
  return build_coupling_graph(arch, {parse_residual_mode(f.residual_mode), !f.unpin_embedding});
}

struct LoadedAssignment {
  CouplingGraph graph;
  PermutationAssignment pi;
};

// Without an explicit --residual-mode the mode follows the file: tie-mode
// assignments carry a "stream" entry. An assignment whose sizes do not fit
// the model was built for another architecture.
LoadedAssignment load_assignment(const Flags& f, const ArchSpec& arch) {
  PermutationAssignment pi = read_permutation_assignment(f.perm);
  Flags resolved = f;
  if (!f.mode_given) resolved.residual_mode = pi.contains("stream") ? "tie" : "compose";
  CouplingGraph g = graph_for(arch, resolved);
  try {
    validate_assignment(g, pi);
  } catch (const ShapeError& e) {
    throw ArchMismatchError(std::string("assignment does not fit the model: ") + e.what());
  }
  return {std::move(g), std::move(pi)};
}

int cmd_match(const Flags& f, std::ostream& out) {
  const WeightSet a = read_checkpoint(f.model_a);
  const WeightSet b = read_checkpoint(f.model_b);
  require_same_arch(a.arch, b.arch);
  const CouplingGraph g = graph_for(a.arch, f);
  if (!f.dump_graph.empty()) write_text_file_atomic(f.dump_graph, format_application_table(g));

  MatchOptions mo;
  mo.max_sweeps = f.max_sweeps;
  mo.seed = f.seed;
  mo.p_norm = f.p_norm;
  mo.include_w0_in_intra = f.include_w0_intra;
  const MatchResult r = weight_match(a, b, g, mo);
  write_permutation_assignment(r.assignment, f.out);
  if (!f.trace.empty()) write_text_file_atomic(f.trace, format_trace(r.trace));
  out << "sweeps " << r.trace.size() - 1 << " objective " << fmt(r.trace.back().objective)
      << (r.converged ? " converged" : " max-sweeps reached") << '\n';
  return r.converged ? kExitOk : kExitNotConverged;
}

int cmd_apply(const Flags& f, std::ostream& out) {
  const std::string kind = read_container_kind(f.model);
  if (kind == "task_vector") {
    const TaskVector tv = read_task_vector(f.model);
    const auto [g, pi] = load_assignment(f, tv.arch);
    write_task_vector(apply_assignment(tv, g, pi), f.out);
  } else {
    const WeightSet ws = read_checkpoint(f.model);
    const auto [g, pi] = load_assignment(f, ws.arch);
    write_checkpoint(apply_assignment(ws, g, pi), f.out);
  }
  out << "wrote " << f.out << '\n';
  return kExitOk;
}

int cmd_task_vector(const Flags& f, std::ostream& out) {
  const WeightSet ft = read_checkpoint(f.finetuned);
  const WeightSet base = read_checkpoint(f.base);
  write_task_vector(compute_task_vector(ft, base), f.out);
  out << "wrote " << f.out << '\n';
  return kExitOk;
}

int cmd_transport(const Flags& f, std::ostream& out) {
  ScalingSpec scaling = ScalingSpec::scalar(f.alpha.value_or(1.0));
  if (!f.alpha_file.empty()) {
    std::vector<double> values = read_alpha_file(f.alpha_file);
    scaling = values.size() == 1 ? ScalingSpec::scalar(values.front())
                                 : ScalingSpec::per_block(std::move(values));
  }
  const WeightSet base = read_checkpoint(f.base);
  const TaskVector tau = read_task_vector(f.task_vector);
  require_same_arch(base.arch, tau.arch);
  const auto [g, pi] = load_assignment(f, base.arch);
  write_checkpoint(transport(base, tau, pi, g, scaling), f.out);
  out << "wrote " << f.out << '\n';
  return kExitOk;
}

int cmd_verify(const Flags& f, std::ostream& out) {
  const WeightSet ws = read_checkpoint(f.model);
  const auto [g, pi] = load_assignment(f, ws.arch);
  EquivalenceOptions eo;
  eo.n_samples = f.samples;
  eo.tol = f.tol;
  eo.seed = f.seed;
  const EquivalenceReport rep = verify_equivalence(ws, g, pi, eo);
  out << "max deviation " << fmt(rep.max_dev) << " tolerance " << fmt(f.tol)
      << (rep.pass ? " pass" : " FAIL") << '\n';
  return rep.pass ? kExitOk : kExitVerifyFailed;
}

int cmd_lmc(const Flags& f, std::ostream& out) {
  const WeightSet a = read_checkpoint(f.model_a);
  const WeightSet b = read_checkpoint(f.model_b);
  require_same_arch(a.arch, b.arch);
  const EvalBatch batch = read_eval_batch(f.batch);
  const std::string csv = format_lmc_csv(lmc_curve(a, b, batch, f.points));
  if (f.out.empty()) {
    out << csv;
  } else {
    write_text_file_atomic(f.out, csv);
  }
  return kExitOk;
}

int cmd_demo(const Flags& f, std::ostream& out) {
  DemoOptions o;
  o.arch = f.arch;
  o.arch.has_layernorm = !f.no_layernorm;
  o.seed = f.seed;
  o.noise = f.noise;
  o.residual_mode = parse_residual_mode(f.demo_mode.value_or("tie"));
  o.train_steps = f.train_steps;
  o.max_sweeps = f.max_sweeps;
  o.p_norm = f.p_norm;
  o.include_w0_in_intra = f.include_w0_intra;
  o.lmc_points = f.points;
  o.verify_samples = f.samples;
  o.tol = f.tol;
  const DemoResult r = run_demo(o);
  if (!f.out.empty()) write_demo_artifacts(r, f.out);
  out << r.report;
  return kExitOk;
}

void add_match_flags(CLI::App* c, Flags& f) {
  c->add_option("--max-sweeps", f.max_sweeps, "Coordinate-descent sweep cap")
      ->check(CLI::PositiveNumber);
  c->add_option("--p-norm", f.p_norm, "Norm for spectral head distances")
      ->check(CLI::Range(1.0, std::numeric_limits<double>::infinity()));
  c->add_flag("--include-w0-intra", f.include_w0_intra,
              "Use the output projection when aligning units inside heads");
}

void add_mode_flag(CLI::App* c, std::string& mode) {
  c->add_option("--residual-mode", mode, "compose or tie")
      ->check(CLI::IsMember({"compose", "tie"}));
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Permutation alignment and task-vector transport for small transformers", "rebasin"};
  app.require_subcommand(1);
  Flags f;

  auto* match = app.add_subcommand("match", "Align model A to model B");
  match->add_option("--model-a", f.model_a, "Checkpoint to permute")->required();
  match->add_option("--model-b", f.model_b, "Reference checkpoint")->required();
  match->add_option("--out", f.out, "Assignment file to write")->required();
  match->add_option("--trace", f.trace, "Per-sweep objective trace file");
  match->add_option("--dump-graph", f.dump_graph, "Write the coupling graph as text");
  match->add_option("--seed", f.seed, "Variable visiting order seed");
  match->add_flag("--unpin-embedding", f.unpin_embedding,
                  "Let the matcher move the embedding-side permutation");
  add_match_flags(match, f);
  add_mode_flag(match, f.residual_mode);

  auto* apply = app.add_subcommand("apply", "Permute a checkpoint or task vector");
  apply->add_option("--model", f.model, "Weight set or task vector")->required();
  apply->add_option("--perm", f.perm, "Assignment file")->required();
  apply->add_option("--out", f.out, "Output directory")->required();
  add_mode_flag(apply, f.residual_mode);

  auto* tv = app.add_subcommand("task-vector", "Fine-tuned minus base");
  tv->add_option("--finetuned", f.finetuned, "Fine-tuned checkpoint")->required();
  tv->add_option("--base", f.base, "Base checkpoint")->required();
  tv->add_option("--out", f.out, "Output directory")->required();

  auto* tr = app.add_subcommand("transport", "Add a permuted, scaled task vector to a base");
  tr->add_option("--base", f.base, "Target base checkpoint")->required();
  tr->add_option("--task-vector", f.task_vector, "Task vector")->required();
  tr->add_option("--perm", f.perm, "Assignment file")->required();
  tr->add_option("--out", f.out, "Output directory")->required();
  auto* alpha = tr->add_option("--alpha", f.alpha, "Scaling coefficient (default 1)");
  tr->add_option("--alpha-file", f.alpha_file, "One scaling value per block")->excludes(alpha);
  add_mode_flag(tr, f.residual_mode);

  auto* verify = app.add_subcommand("verify", "Check functional equivalence under an assignment");
  verify->add_option("--model", f.model, "Checkpoint")->required();
  verify->add_option("--perm", f.perm, "Assignment file")->required();
  verify->add_option("--samples", f.samples, "Random batches")->check(CLI::PositiveNumber);
  verify->add_option("--tol", f.tol, "Maximum allowed output deviation")
      ->check(CLI::NonNegativeNumber);
  verify->add_option("--seed", f.seed, "Batch sampling seed");
  add_mode_flag(verify, f.residual_mode);

  auto* lmc = app.add_subcommand("lmc", "Loss along the straight line from A to B");
  lmc->add_option("--model-a", f.model_a, "Left endpoint")->required();
  lmc->add_option("--model-b", f.model_b, "Right endpoint")->required();
  lmc->add_option("--batch", f.batch, "Evaluation batch")->required();
  lmc->add_option("--points", f.points, "Grid size, at least 2")->check(CLI::Range(2, 100000));
  lmc->add_option("--out", f.out, "CSV file (stdout when omitted)");

  auto* demo = app.add_subcommand("demo", "Train, plant, match, verify and interpolate");
  demo->add_option("--seed", f.seed, "Seed for every random choice");
  demo->add_option("--noise", f.noise, "Noise relative to each tensor's std")
      ->check(CLI::NonNegativeNumber);
  demo->add_option("--out", f.out, "Directory for artifacts");
  demo->add_option("--blocks", f.arch.n_blocks)->check(CLI::PositiveNumber);
  demo->add_option("--heads", f.arch.n_heads)->check(CLI::PositiveNumber);
  demo->add_option("--embed-dim", f.arch.embed_dim)->check(CLI::PositiveNumber);
  demo->add_option("--mlp-hidden", f.arch.mlp_hidden)->check(CLI::PositiveNumber);
  demo->add_option("--input-dim", f.arch.input_dim)->check(CLI::PositiveNumber);
  demo->add_option("--output-dim", f.arch.output_dim)->check(CLI::PositiveNumber);
  demo->add_flag("--no-layernorm", f.no_layernorm);
  demo->add_option("--train-steps", f.train_steps);
  demo->add_option("--points", f.points, "Interpolation grid size")->check(CLI::Range(3, 100000));
  demo->add_option("--samples", f.samples, "Equivalence batches")->check(CLI::PositiveNumber);
  demo->add_option("--tol", f.tol)->check(CLI::NonNegativeNumber);
  demo->add_option("--residual-mode", f.demo_mode, "compose or tie (default tie)")
      ->check(CLI::IsMember({"compose", "tie"}));
  add_match_flags(demo, f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitError;
  }
  if (demo->parsed() && !demo->count("--samples")) f.samples = DemoOptions{}.verify_samples;
  for (const auto* sub : {apply, tr, verify}) {
    if (sub->parsed() && sub->count("--residual-mode")) f.mode_given = true;
  }

  try {
    if (match->parsed()) return cmd_match(f, out);
    if (apply->parsed()) return cmd_apply(f, out);
    if (tv->parsed()) return cmd_task_vector(f, out);
    if (tr->parsed()) return cmd_transport(f, out);
    if (verify->parsed()) return cmd_verify(f, out);
    if (lmc->parsed()) return cmd_lmc(f, out);
    if (demo->parsed()) return cmd_demo(f, out);
  } catch (const ArchMismatchError& e) {
    err << "error: architecture mismatch: " << e.what() << '\n';
    return kExitArchMismatch;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}

}  // namespace rebasin
