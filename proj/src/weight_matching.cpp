#include "rebasin/weight_matching.hpp"

#include <atomic>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "rebasin/attention_align.hpp"
#include "rebasin/errors.hpp"
#include "rebasin/lap.hpp"

namespace rebasin {

namespace {

std::atomic<std::uint64_t> g_match_calls{0};

// Every canonical matrix is a *.weight tensor; vectors never enter the costs.
bool is_matrix(const std::string& tensor) { return tensor.ends_with(".weight"); }

double tensor_alignment(const WeightSet& a, const WeightSet& b, const std::string& tensor,
                        const PermutationAssignment& pi, const CouplingGraph& g) {
  return frobenius_inner(b.at(tensor), apply_to_tensor(a.at(tensor), tensor, g, pi));
}

// Objective terms that depend on `variable`.
double local_objective(const WeightSet& a, const WeightSet& b, const std::string& variable,
                       const PermutationAssignment& pi, const CouplingGraph& g) {
  std::set<std::string> tensors;
  for (const Application* app : g.applications_of(variable)) {
    if (is_matrix(app->tensor)) tensors.insert(app->tensor);
  }
  double s = 0.0;
  for (const auto& t : tensors) s += tensor_alignment(a, b, t, pi, g);
  return s;
}

// A_t with the axis not governed by `variable` permuted per `pi`.
Matrix other_axis_permuted(const WeightSet& a, const Application& app,
                           const PermutationAssignment& pi, const CouplingGraph& g) {
  Matrix m = a.at(app.tensor);
  const Axis other = app.axis == Axis::rows ? Axis::cols : Axis::rows;
  if (const Application* o = g.application(app.tensor, other)) {
    const Permutation& p = pi.at(o->variable);
    if (other == Axis::rows) {
      m = permute_rows(m, o->direction == Direction::forward ? p : inverse(p));
    } else {
      m = permute_cols(m, o->direction == Direction::inverse ? p : inverse(p));
    }
  }
  return m;
}

void check_inputs(const WeightSet& a, const WeightSet& b, const CouplingGraph& g) {
  require_same_arch(a.arch, b.arch);
  require_same_arch(a.arch, g.arch);
  a.validate();
  b.validate();
}

BlockPermutation solve_attention_variable(const PermutationVariable& var, const WeightSet& a,
                                          const WeightSet& b, const PermutationAssignment& pi,
                                          const CouplingGraph& g, const MatchOptions& opts) {
  const BlockWiring& w = g.blocks.at(var.block);
  const std::string prefix = block_prefix(var.block) + "attn.";
  const Permutation& incoming = pi.at(w.input);
  const AttentionWeights wa{permute_cols(a.at(prefix + "q.weight"), incoming),
                            permute_cols(a.at(prefix + "k.weight"), incoming),
                            permute_cols(a.at(prefix + "v.weight"), incoming)};
  const AttentionWeights wb{b.at(prefix + "q.weight"), b.at(prefix + "k.weight"),
                            b.at(prefix + "v.weight")};
  AlignOptions align;
  align.p_norm = opts.p_norm;
  Matrix out_a;
  if (opts.include_w0_in_intra) {
    out_a = permute_rows(a.at(prefix + "out.weight"), pi.at(w.attn_out));
    align.out_a = &out_a;
    align.out_b = &b.at(prefix + "out.weight");
  }
  return align_heads(wa, wb, g.arch.n_heads, align);
}

}  // namespace

double soblap_objective(const WeightSet& a, const WeightSet& b, const PermutationAssignment& pi,
                        const CouplingGraph& g) {
  require_same_arch(a.arch, b.arch);
  validate_assignment(g, pi);
  double s = 0.0;
  for (const auto& spec : canonical_layout(a.arch)) {
    if (spec.is_matrix()) s += tensor_alignment(a, b, spec.name, pi, g);
  }
  return s;
}

Permutation solve_mlp_variable(const std::string& variable, const WeightSet& a,
                               const WeightSet& b, const PermutationAssignment& current,
                               const CouplingGraph& g) {
  const PermutationVariable& var = g.variable(variable);
  Matrix value(var.size, var.size);
  for (const Application* app : g.applications_of(variable)) {
    if (!is_matrix(app->tensor)) continue;
    const Matrix ap = other_axis_permuted(a, *app, current, g);
    const Matrix& bt = b.at(app->tensor);
    if (app->axis == Axis::rows && app->direction == Direction::forward) {
      value += matmul_nt(bt, ap);
    } else if (app->axis == Axis::cols && app->direction == Direction::inverse) {
      value += matmul_tn(bt, ap);
    } else if (app->axis == Axis::rows) {
      value += matmul_nt(ap, bt);
    } else {
      value += matmul_tn(ap, bt);
    }
  }
  return solve_max(value).perm;
}

MatchResult weight_match(const WeightSet& a, const WeightSet& b, const CouplingGraph& g,
                         const MatchOptions& opts) {
  ++g_match_calls;
  if (opts.max_sweeps < 1) throw PreconditionError("max_sweeps must be >= 1");
  check_inputs(a, b, g);

  MatchResult result;
  PermutationAssignment& pi = result.assignment;
  pi = opts.initial ? *opts.initial : identity_assignment(g);
  validate_assignment(g, pi);

  std::vector<const PermutationVariable*> order = g.free_variables();
  std::mt19937_64 rng(opts.seed);
  result.trace.push_back({0, soblap_objective(a, b, pi, g), 0});

  for (std::size_t sweep = 1; sweep <= opts.max_sweeps; ++sweep) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    std::size_t changed = 0;
    for (const PermutationVariable* var : order) {
      PermutationAssignment candidate = pi;
      if (var->kind == VariableKind::attention) {
        candidate.set(var->id, solve_attention_variable(*var, a, b, pi, g, opts));
      } else {
        candidate.set(var->id, solve_mlp_variable(var->id, a, b, pi, g));
      }
      if (candidate.at(var->id) == pi.at(var->id)) continue;
      const double before = local_objective(a, b, var->id, pi, g);
      const double after = local_objective(a, b, var->id, candidate, g);
      if (after > before + 1e-12 * std::max(1.0, std::abs(before))) {
        pi = std::move(candidate);
        ++changed;
      }
    }
    result.trace.push_back({sweep, soblap_objective(a, b, pi, g), changed});
    if (changed == 0) {
      result.converged = true;
      break;
    }
  }
  return result;
}

std::uint64_t weight_match_call_count() { return g_match_calls.load(); }

std::string format_trace(const std::vector<SweepRecord>& trace) {
  std::ostringstream os;
  os.precision(17);
  os << "# sweep objective changed\n";
  for (const auto& r : trace) os << r.sweep << ' ' << r.objective << ' ' << r.changed << '\n';
  return os.str();
}

}  // namespace rebasin
