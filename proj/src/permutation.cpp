#include "rebasin/permutation.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "rebasin/errors.hpp"

namespace rebasin {

Permutation::Permutation(std::vector<std::size_t> indices)
    : indices_(std::move(indices)) {
  const std::size_t n = indices_.size();
  std::vector<bool> seen(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t v = indices_[i];
    if (v >= n) {
      throw BijectionError("permutation entry " + std::to_string(v) +
                           " at position " + std::to_string(i) +
                           " is out of range for size " + std::to_string(n));
    }
    if (seen[v]) {
      throw BijectionError("permutation index " + std::to_string(v) +
                           " appears more than once");
    }
    seen[v] = true;
  }
}

Permutation Permutation::identity(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Permutation p;
  p.indices_ = std::move(idx);
  return p;
}

Permutation Permutation::random(std::size_t n, std::mt19937_64& rng) {
  Permutation p = identity(n);
  // Fisher-Yates with explicit draws so results do not depend on the
  // standard library's std::shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(p.indices_[i - 1], p.indices_[pick(rng)]);
  }
  return p;
}

bool Permutation::is_identity() const {
  for (std::size_t i = 0; i < indices_.size(); ++i) {
    if (indices_[i] != i) return false;
  }
  return true;
}

void Permutation::check_length(std::size_t n) const {
  if (n != indices_.size()) {
    throw ShapeError("permutation of size " + std::to_string(indices_.size()) +
                     " applied to sequence of length " + std::to_string(n));
  }
}

Permutation compose(const Permutation& a, const Permutation& b) {
  if (a.size() != b.size()) {
    throw ShapeError("cannot compose permutations of sizes " +
                     std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  std::vector<std::size_t> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[b[i]];
  return Permutation(std::move(out));
}

Permutation inverse(const Permutation& p) {
  std::vector<std::size_t> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[p[i]] = i;
  return Permutation(std::move(out));
}

std::string to_string(const Permutation& p) {
  std::ostringstream os;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (i) os << ',';
    os << p[i];
  }
  return os.str();
}

std::ostream& operator<<(std::ostream& os, const Permutation& p) {
  return os << '[' << to_string(p) << ']';
}

}  // namespace rebasin
