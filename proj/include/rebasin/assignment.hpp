#pragma once

#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "rebasin/permutation.hpp"

namespace rebasin {

// Structured attention permutation: whole heads are reordered by `inter` and
// units inside each destination head by `intra[i]`. Destination unit
// (i, r) is taken from source head inter[i], source row intra[i][r].
struct BlockPermutation {
  Permutation inter;               // size H
  std::vector<Permutation> intra;  // H permutations of size d_k

  std::size_t n_heads() const { return inter.size(); }
  std::size_t head_dim() const { return intra.empty() ? 0 : intra.front().size(); }

  // flattened[i * d_k + r] == inter[i] * d_k + intra[i][r]
  Permutation flattened() const;

  // Throws BijectionError / ShapeError when the parts are inconsistent.
  void validate() const;

  static BlockPermutation identity(std::size_t n_heads, std::size_t head_dim);
  static BlockPermutation random(std::size_t n_heads, std::size_t head_dim,
                                 std::mt19937_64& rng);

  friend bool operator==(const BlockPermutation&, const BlockPermutation&) = default;
};

BlockPermutation inverse(const BlockPermutation& bp);

// Map from permutation-variable id to its permutation. Attention variables may
// additionally carry their BlockPermutation; the flat entry always equals its
// flattening. A flat-only attention entry is allowed (e.g. an unstructured
// permutation used as a negative control).
class PermutationAssignment {
 public:
  void set(const std::string& id, Permutation p);
  void set(const std::string& id, BlockPermutation bp);

  bool contains(const std::string& id) const { return flat_.count(id) != 0; }
  // Throws IncompleteAssignmentError when id is absent.
  const Permutation& at(const std::string& id) const;
  const BlockPermutation* block(const std::string& id) const;

  const std::map<std::string, Permutation>& entries() const { return flat_; }
  const std::map<std::string, BlockPermutation>& blocks() const { return blocks_; }

  std::size_t size() const { return flat_.size(); }

  friend bool operator==(const PermutationAssignment&,
                         const PermutationAssignment&) = default;

 private:
  std::map<std::string, Permutation> flat_;
  std::map<std::string, BlockPermutation> blocks_;
};

// Entrywise inverse, keeping block structure where present.
PermutationAssignment inverse(const PermutationAssignment& a);

}  // namespace rebasin
