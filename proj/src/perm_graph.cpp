#include "rebasin/perm_graph.hpp"

#include <set>
#include <sstream>

#include "rebasin/errors.hpp"

namespace rebasin {

std::string to_string(ResidualMode m) { return m == ResidualMode::compose ? "compose" : "tie"; }

ResidualMode parse_residual_mode(const std::string& s) {
  if (s == "compose") return ResidualMode::compose;
  if (s == "tie") return ResidualMode::tie;
  throw PreconditionError("unknown residual mode '" + s + "' (expected compose|tie)");
}

const PermutationVariable& CouplingGraph::variable(const std::string& id) const {
  for (const auto& v : variables)
    if (v.id == id) return v;
  throw UnknownVariableError("permutation variable '" + id + "' is not in the coupling graph");
}

bool CouplingGraph::has_variable(const std::string& id) const {
  for (const auto& v : variables)
    if (v.id == id) return true;
  return false;
}

std::vector<const Application*> CouplingGraph::applications_of(const std::string& id) const {
  std::vector<const Application*> out;
  for (const auto& a : applications)
    if (a.variable == id) out.push_back(&a);
  return out;
}

const Application* CouplingGraph::application(const std::string& tensor, Axis axis) const {
  for (const auto& a : applications)
    if (a.tensor == tensor && a.axis == axis) return &a;
  return nullptr;
}

std::vector<const PermutationVariable*> CouplingGraph::free_variables() const {
  std::vector<const PermutationVariable*> out;
  for (const auto& v : variables)
    if (!v.pinned) out.push_back(&v);
  return out;
}

void CouplingGraph::validate() const {
  std::map<std::string, std::vector<std::size_t>> shapes;
  for (const auto& spec : canonical_layout(arch)) shapes[spec.name] = spec.shape;

  std::set<std::pair<std::string, Axis>> governed;
  std::map<std::string, std::pair<int, int>> usage;  // rows, cols
  for (const auto& app : applications) {
    auto it = shapes.find(app.tensor);
    if (it == shapes.end()) throw PreconditionError("graph references unknown tensor " + app.tensor);
    if (!governed.insert({app.tensor, app.axis}).second) {
      throw PreconditionError("tensor axis governed twice: " + app.tensor);
    }
    const auto& var = variable(app.variable);
    const auto& shape = it->second;
    std::size_t len = 0;
    if (app.axis == Axis::rows) {
      len = shape[0];
    } else {
      if (shape.size() != 2) throw PreconditionError("column application on vector " + app.tensor);
      len = shape[1];
    }
    if (len != var.size) {
      throw PreconditionError("variable " + var.id + " of size " + std::to_string(var.size) +
                              " applied to axis of length " + std::to_string(len) + " in " +
                              app.tensor);
    }
    auto& u = usage[app.variable];
    (app.axis == Axis::rows ? u.first : u.second)++;
  }
  for (const auto& v : variables) {
    const auto u = usage[v.id];
    if (u.first == 0 || u.second == 0) {
      throw PreconditionError("variable " + v.id + " is not both applied and undone");
    }
  }
  if (mode == ResidualMode::tie) {
    for (const auto& b : blocks) {
      if (b.input != b.attn_out || b.attn_out != b.mlp_out) {
        throw PreconditionError("tie mode requires P_in, P_W0 and P_W2 to alias");
      }
    }
  }
}

CouplingGraph build_coupling_graph(const ArchSpec& arch, const GraphOptions& opts) {
  arch.validate();
  CouplingGraph g;
  g.arch = arch;
  g.mode = opts.residual_mode;
  const std::size_t dm = arch.embed_dim;
  const bool tie = opts.residual_mode == ResidualMode::tie;

  auto add_var = [&](std::string id, std::size_t size, VariableKind kind, std::size_t block,
                     bool pinned) {
    g.variables.push_back({std::move(id), size, kind, block, pinned});
  };
  auto rows = [&](const std::string& tensor, const std::string& var) {
    g.applications.push_back({tensor, Axis::rows, var, Direction::forward});
  };
  auto cols = [&](const std::string& tensor, const std::string& var) {
    g.applications.push_back({tensor, Axis::cols, var, Direction::inverse});
  };

  const std::string embed_var = tie ? "stream" : "embed";
  add_var(embed_var, dm, VariableKind::stream, 0, opts.pin_embedding);
  rows("embed.weight", embed_var);
  rows("embed.bias", embed_var);

  std::string incoming = embed_var;
  for (std::size_t i = 0; i < arch.n_blocks; ++i) {
    const std::string b = block_prefix(i);
    BlockWiring w;
    w.input = incoming;
    w.attn = b + "attn";
    w.attn_out = tie ? embed_var : b + "attn_out";
    w.mlp_hidden = b + "mlp_hidden";
    w.mlp_out = tie ? embed_var : b + "mlp_out";

    add_var(w.attn, dm, VariableKind::attention, i, false);
    if (!tie) add_var(w.attn_out, dm, VariableKind::stream, i, false);
    add_var(w.mlp_hidden, arch.mlp_hidden, VariableKind::mlp_hidden, i, false);
    if (!tie) add_var(w.mlp_out, dm, VariableKind::stream, i, false);

    for (const char* proj : {"q", "k", "v"}) {
      rows(b + "attn." + proj + ".weight", w.attn);
      cols(b + "attn." + proj + ".weight", w.input);
      rows(b + "attn." + proj + ".bias", w.attn);
    }
    rows(b + "attn.out.weight", w.attn_out);
    cols(b + "attn.out.weight", w.attn);
    rows(b + "attn.out.bias", w.attn_out);
    if (arch.has_layernorm) {
      rows(b + "ln1.gain", w.attn_out);
      rows(b + "ln1.bias", w.attn_out);
    }
    rows(b + "mlp.fc1.weight", w.mlp_hidden);
    cols(b + "mlp.fc1.weight", w.attn_out);
    rows(b + "mlp.fc1.bias", w.mlp_hidden);
    rows(b + "mlp.fc2.weight", w.mlp_out);
    cols(b + "mlp.fc2.weight", w.mlp_hidden);
    rows(b + "mlp.fc2.bias", w.mlp_out);
    if (arch.has_layernorm) {
      rows(b + "ln2.gain", w.mlp_out);
      rows(b + "ln2.bias", w.mlp_out);
    }
    incoming = w.mlp_out;
    g.blocks.push_back(std::move(w));
  }
  // Output classes keep their order: only the head's input axis is permuted.
  cols("head.weight", incoming);

  g.validate();
  return g;
}

std::string format_application_table(const CouplingGraph& g) {
  std::ostringstream os;
  os << "# residual_mode " << to_string(g.mode) << '\n';
  for (const auto& v : g.variables) {
    os << "# variable " << v.id << " size " << v.size << (v.pinned ? " pinned" : "") << '\n';
  }
  for (const auto& a : g.applications) {
    os << a.tensor << ' ' << (a.axis == Axis::rows ? "rows" : "cols") << ' ' << a.variable << ' '
       << (a.direction == Direction::forward ? "P" : "P^T") << '\n';
  }
  return os.str();
}

PermutationAssignment identity_assignment(const CouplingGraph& g) {
  PermutationAssignment a;
  const std::size_t dk = g.arch.head_dim();
  for (const auto& v : g.variables) {
    if (v.kind == VariableKind::attention) {
      a.set(v.id, BlockPermutation::identity(g.arch.n_heads, dk));
    } else {
      a.set(v.id, Permutation::identity(v.size));
    }
  }
  return a;
}

PermutationAssignment random_assignment(const CouplingGraph& g, std::mt19937_64& rng) {
  PermutationAssignment a = identity_assignment(g);
  for (const auto& v : g.variables) {
    if (v.pinned) continue;
    if (v.kind == VariableKind::attention) {
      a.set(v.id, BlockPermutation::random(g.arch.n_heads, g.arch.head_dim(), rng));
    } else {
      a.set(v.id, Permutation::random(v.size, rng));
    }
  }
  return a;
}

void validate_assignment(const CouplingGraph& g, const PermutationAssignment& a) {
  for (const auto& [id, p] : a.entries()) {
    const auto& v = g.variable(id);
    if (p.size() != v.size) {
      throw ShapeError("assignment for '" + id + "' has size " + std::to_string(p.size()) +
                       ", variable needs " + std::to_string(v.size));
    }
    if (const BlockPermutation* bp = a.block(id)) {
      if (bp->n_heads() != g.arch.n_heads) {
        throw ShapeError("assignment for '" + id + "' has the wrong head count");
      }
    }
  }
  for (const auto& v : g.variables) {
    if (!a.contains(v.id)) {
      throw IncompleteAssignmentError("assignment has no entry for variable '" + v.id + "'");
    }
  }
}

Matrix apply_to_tensor(const Matrix& m, const std::string& tensor, const CouplingGraph& g,
                       const PermutationAssignment& a) {
  Matrix out = m;
  if (const Application* r = g.application(tensor, Axis::rows)) {
    const Permutation& p = a.at(r->variable);
    out = permute_rows(out, r->direction == Direction::forward ? p : inverse(p));
  }
  if (const Application* c = g.application(tensor, Axis::cols)) {
    const Permutation& p = a.at(c->variable);
    out = permute_cols(out, c->direction == Direction::inverse ? p : inverse(p));
  }
  return out;
}

template <class Tag>
ParameterSet<Tag> apply_assignment(const ParameterSet<Tag>& p, const CouplingGraph& g,
                                   const PermutationAssignment& a) {
  require_same_arch(p.arch, g.arch);
  validate_assignment(g, a);
  ParameterSet<Tag> out;
  out.arch = p.arch;
  for (const auto& [name, m] : p.tensors) out.tensors.emplace(name, apply_to_tensor(m, name, g, a));
  return out;
}

template ParameterSet<WeightTag> apply_assignment(const ParameterSet<WeightTag>&,
                                                  const CouplingGraph&,
                                                  const PermutationAssignment&);
template ParameterSet<TaskVectorTag> apply_assignment(const ParameterSet<TaskVectorTag>&,
                                                      const CouplingGraph&,
                                                      const PermutationAssignment&);
template ParameterSet<GradientTag> apply_assignment(const ParameterSet<GradientTag>&,
                                                    const CouplingGraph&,
                                                    const PermutationAssignment&);

std::vector<ResidualPermutations> residual_permutations(const CouplingGraph& g,
                                                        const PermutationAssignment& a) {
  std::vector<ResidualPermutations> out;
  for (const auto& w : g.blocks) {
    const Permutation& in = a.at(w.input);
    const Permutation& w0 = a.at(w.attn_out);
    const Permutation& w2 = a.at(w.mlp_out);
    // mat(compose(x, y)) == mat(y) mat(x)
    out.push_back({compose(inverse(in), w0), compose(inverse(w0), w2)});
  }
  return out;
}

}  // namespace rebasin
