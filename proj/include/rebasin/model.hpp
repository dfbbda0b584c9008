#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "rebasin/linalg.hpp"

namespace rebasin {

struct ArchSpec {
  std::size_t n_blocks = 1;
  std::size_t n_heads = 1;
  std::size_t embed_dim = 1;
  std::size_t mlp_hidden = 1;
  std::size_t input_dim = 1;
  std::size_t output_dim = 1;
  bool has_layernorm = false;

  std::size_t head_dim() const { return n_heads ? embed_dim / n_heads : 0; }

  // Throws PreconditionError when a dimension is zero or the head split is
  // not exact.
  void validate() const;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

std::string describe(const ArchSpec& arch);

// Throws ArchMismatchError naming the first differing field.
void require_same_arch(const ArchSpec& a, const ArchSpec& b);

struct TensorSpec {
  std::string name;
  std::vector<std::size_t> shape;  // rank 1 or 2

  bool is_matrix() const { return shape.size() == 2; }
};

// Canonical tensors in storage order. Matrices are (out, in); vectors are
// stored in memory as n x 1.
//   embed.weight (d_m, input_dim), embed.bias (d_m)
//   block.{i}.attn.{q,k,v,out}.{weight,bias}
//   block.{i}.ln1.{gain,bias}          (has_layernorm only)
//   block.{i}.mlp.fc1.{weight,bias}    (d_h, d_m), (d_h)
//   block.{i}.mlp.fc2.{weight,bias}    (d_m, d_h), (d_m)
//   block.{i}.ln2.{gain,bias}          (has_layernorm only)
//   head.weight (output_dim, d_m), head.bias (output_dim)
std::vector<TensorSpec> canonical_layout(const ArchSpec& arch);

std::string block_prefix(std::size_t block);

// Which block a canonical tensor belongs to; embed.* maps to 0 and head.* to
// n_blocks - 1.
std::size_t owning_block(const ArchSpec& arch, const std::string& tensor);

struct WeightTag {};
struct TaskVectorTag {};
struct GradientTag {};

// Named tensors over the canonical key space of one architecture. The tag
// keeps weights, deltas and gradients from being mixed up at compile time.
template <class Tag>
struct ParameterSet {
  ArchSpec arch;
  std::map<std::string, Matrix> tensors;

  const Matrix& at(const std::string& name) const;
  Matrix& at(const std::string& name);

  static ParameterSet zeros(const ArchSpec& arch);

  // Throws MissingTensorError / TensorShapeError / UnexpectedTensorError /
  // NonFiniteTensorError.
  void validate() const;

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;
};

using WeightSet = ParameterSet<WeightTag>;
using TaskVector = ParameterSet<TaskVectorTag>;
using Gradient = ParameterSet<GradientTag>;

extern template struct ParameterSet<WeightTag>;
extern template struct ParameterSet<TaskVectorTag>;
extern template struct ParameterSet<GradientTag>;

// Elementwise combinations over identical key sets; throw ArchMismatchError
// otherwise.
template <class Tag>
ParameterSet<Tag> add(const ParameterSet<Tag>& a, const ParameterSet<Tag>& b);
template <class Tag>
ParameterSet<Tag> subtract(const ParameterSet<Tag>& a, const ParameterSet<Tag>& b);
template <class Tag>
ParameterSet<Tag> scale(const ParameterSet<Tag>& a, double s);
// (1 - t) * a + t * b
template <class Tag>
ParameterSet<Tag> interpolate(const ParameterSet<Tag>& a, const ParameterSet<Tag>& b,
                              double t);

// Change the tag while keeping values, e.g. to treat a weight set as a delta.
template <class To, class From>
ParameterSet<To> retag(ParameterSet<From> p) {
  return ParameterSet<To>{std::move(p.arch), std::move(p.tensors)};
}

}  // namespace rebasin
