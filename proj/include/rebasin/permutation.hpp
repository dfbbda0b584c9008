#pragma once

#include <cstddef>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace rebasin {

// A bijection on {0, ..., n-1} stored as an index vector. Applied to a
// sequence v it produces w with w[i] = v[p[i]], which is the action of the
// 0/1 matrix P with P[i, p[i]] = 1 (so P W takes rows W[p[i], :]).
class Permutation {
 public:
  Permutation() = default;

  // Throws BijectionError on duplicate or out-of-range entries.
  explicit Permutation(std::vector<std::size_t> indices);

  static Permutation identity(std::size_t n);
  static Permutation random(std::size_t n, std::mt19937_64& rng);

  std::size_t size() const { return indices_.size(); }
  std::size_t operator[](std::size_t i) const { return indices_[i]; }
  const std::vector<std::size_t>& indices() const { return indices_; }

  bool is_identity() const;

  // Gathers v by this permutation: out[i] = v[p[i]].
  template <class T>
  std::vector<T> apply(std::span<const T> v) const {
    check_length(v.size());
    std::vector<T> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[indices_[i]];
    return out;
  }

  friend bool operator==(const Permutation&, const Permutation&) = default;

 private:
  void check_length(std::size_t n) const;

  std::vector<std::size_t> indices_;
};

// (a o b)(i) = a(b(i)). As matrices, mat(compose(a, b)) == mat(b) * mat(a).
Permutation compose(const Permutation& a, const Permutation& b);
Permutation inverse(const Permutation& p);

// "1,0,2" style rendering used by the assignment file format.
std::string to_string(const Permutation& p);
std::ostream& operator<<(std::ostream& os, const Permutation& p);

}  // namespace rebasin
