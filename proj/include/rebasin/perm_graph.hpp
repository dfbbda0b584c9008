#pragma once

#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "rebasin/assignment.hpp"
#include "rebasin/model.hpp"

namespace rebasin {

// compose: every block has its own P_in / P_W0 / P_W2 and the skips carry the
//          compositions I_i = P_W0 P_in^T and I_out = P_W2 P_W0^T.
// tie:     one residual-stream permutation shared by the whole model, so the
//          skips stay plain identities.
enum class ResidualMode { compose, tie };

enum class Axis { rows, cols };

// forward: P W (rows) / W P (cols); inverse: P^T W (rows) / W P^T (cols).
enum class Direction { forward, inverse };

enum class VariableKind { stream, attention, mlp_hidden };

std::string to_string(ResidualMode m);
ResidualMode parse_residual_mode(const std::string& s);

struct PermutationVariable {
  std::string id;
  std::size_t size = 0;
  VariableKind kind = VariableKind::stream;
  std::size_t block = 0;
  bool pinned = false;  // held at its initial value by the matcher
};

struct Application {
  std::string tensor;
  Axis axis = Axis::rows;
  std::string variable;
  Direction direction = Direction::forward;
};

// Variable ids touching one block. In tie mode input, attn_out and mlp_out
// all name the single stream variable.
struct BlockWiring {
  std::string input;       // P_in
  std::string attn;        // P_attn
  std::string attn_out;    // P_W0
  std::string mlp_hidden;  // P_W1
  std::string mlp_out;     // P_W2
};

struct GraphOptions {
  ResidualMode residual_mode = ResidualMode::compose;
  bool pin_embedding = true;
};

class CouplingGraph {
 public:
  ArchSpec arch;
  ResidualMode mode = ResidualMode::compose;
  std::vector<PermutationVariable> variables;
  std::vector<Application> applications;
  std::vector<BlockWiring> blocks;

  // Throws UnknownVariableError.
  const PermutationVariable& variable(const std::string& id) const;
  bool has_variable(const std::string& id) const;

  std::vector<const Application*> applications_of(const std::string& id) const;
  const Application* application(const std::string& tensor, Axis axis) const;

  std::vector<const PermutationVariable*> free_variables() const;

  // Checks the wiring invariants; throws PreconditionError on violation.
  void validate() const;
};

// Throws PreconditionError when the arch is invalid (e.g. d_m % H != 0).
CouplingGraph build_coupling_graph(const ArchSpec& arch, const GraphOptions& opts = {});

// One line per application: tensor, axis, variable, direction.
std::string format_application_table(const CouplingGraph& g);

PermutationAssignment identity_assignment(const CouplingGraph& g);

// Uniformly random structured assignment: attention variables get a random
// BlockPermutation, pinned variables stay identity.
PermutationAssignment random_assignment(const CouplingGraph& g, std::mt19937_64& rng);

// Completeness and size checks. Throws IncompleteAssignmentError,
// UnknownVariableError or ShapeError.
void validate_assignment(const CouplingGraph& g, const PermutationAssignment& a);

// Permutes one tensor by whatever variables govern its axes.
Matrix apply_to_tensor(const Matrix& m, const std::string& tensor, const CouplingGraph& g,
                       const PermutationAssignment& a);

template <class Tag>
ParameterSet<Tag> apply_assignment(const ParameterSet<Tag>& p, const CouplingGraph& g,
                                   const PermutationAssignment& a);

// Skip-connection permutations of one block, as index vectors acting on the
// feature axis: skip(x)[k] = x[perm[k]].
struct ResidualPermutations {
  Permutation attn_skip;  // I_i   = P_W0 P_in^T
  Permutation mlp_skip;   // I_out = P_W2 P_W0^T
};

// Per block; all identities in tie mode.
std::vector<ResidualPermutations> residual_permutations(const CouplingGraph& g,
                                                        const PermutationAssignment& a);

}  // namespace rebasin
