#include "rebasin/assignment.hpp"

#include "rebasin/errors.hpp"

namespace rebasin {

void BlockPermutation::validate() const {
  if (intra.size() != inter.size()) {
    throw ShapeError("block permutation has " + std::to_string(inter.size()) +
                     " heads but " + std::to_string(intra.size()) +
                     " intra-head permutations");
  }
  for (const auto& p : intra) {
    if (p.size() != head_dim() || p.size() == 0) {
      throw ShapeError("intra-head permutations must share one non-zero size");
    }
  }
}

Permutation BlockPermutation::flattened() const {
  validate();
  const std::size_t dk = head_dim();
  std::vector<std::size_t> flat(inter.size() * dk);
  for (std::size_t i = 0; i < inter.size(); ++i)
    for (std::size_t r = 0; r < dk; ++r) flat[i * dk + r] = inter[i] * dk + intra[i][r];
  return Permutation(std::move(flat));
}

BlockPermutation BlockPermutation::identity(std::size_t n_heads, std::size_t head_dim) {
  return {Permutation::identity(n_heads),
          std::vector<Permutation>(n_heads, Permutation::identity(head_dim))};
}

BlockPermutation BlockPermutation::random(std::size_t n_heads, std::size_t head_dim,
                                          std::mt19937_64& rng) {
  BlockPermutation bp;
  bp.inter = Permutation::random(n_heads, rng);
  for (std::size_t i = 0; i < n_heads; ++i) bp.intra.push_back(Permutation::random(head_dim, rng));
  return bp;
}

BlockPermutation inverse(const BlockPermutation& bp) {
  // Source head s = inter[i] maps back to destination i with the inverse
  // intra permutation of that pair.
  BlockPermutation inv;
  inv.inter = inverse(bp.inter);
  inv.intra.resize(bp.n_heads());
  for (std::size_t i = 0; i < bp.n_heads(); ++i) inv.intra[bp.inter[i]] = inverse(bp.intra[i]);
  return inv;
}

void PermutationAssignment::set(const std::string& id, Permutation p) {
  blocks_.erase(id);
  flat_.insert_or_assign(id, std::move(p));
}

void PermutationAssignment::set(const std::string& id, BlockPermutation bp) {
  Permutation flat = bp.flattened();
  flat_.insert_or_assign(id, std::move(flat));
  blocks_.insert_or_assign(id, std::move(bp));
}

const Permutation& PermutationAssignment::at(const std::string& id) const {
  auto it = flat_.find(id);
  if (it == flat_.end()) {
    throw IncompleteAssignmentError("assignment has no entry for variable '" + id + "'");
  }
  return it->second;
}

const BlockPermutation* PermutationAssignment::block(const std::string& id) const {
  auto it = blocks_.find(id);
  return it == blocks_.end() ? nullptr : &it->second;
}

PermutationAssignment inverse(const PermutationAssignment& a) {
  PermutationAssignment out;
  for (const auto& [id, p] : a.entries()) {
    if (const BlockPermutation* bp = a.block(id)) {
      out.set(id, inverse(*bp));
    } else {
      out.set(id, inverse(p));
    }
  }
  return out;
}

}  // namespace rebasin
