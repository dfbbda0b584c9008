#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "rebasin/errors.hpp"
#include "rebasin/linalg.hpp"
#include "rebasin/permutation.hpp"

using namespace rebasin;

TEST_CASE("permutation construction rejects non-bijections") {
  CHECK_THROWS_AS(Permutation({0, 0}), BijectionError);
  CHECK_THROWS_AS(Permutation({0, 2}), BijectionError);
  CHECK_NOTHROW(Permutation({1, 0, 2}));
  CHECK(Permutation::identity(4).is_identity());
  CHECK(to_string(Permutation({1, 0, 2})) == "1,0,2");
}

TEST_CASE("compose and inverse follow the index convention") {
  const Permutation a({1, 2, 0}), b({2, 0, 1});
  CHECK(compose(a, b).is_identity());
  std::mt19937_64 rng(7);
  for (int t = 0; t < 50; ++t) {
    const Permutation p = Permutation::random(9, rng);
    const Permutation q = Permutation::random(9, rng);
    CHECK(compose(p, Permutation::identity(9)) == p);
    CHECK(compose(p, inverse(p)).is_identity());
    CHECK(compose(inverse(p), p).is_identity());
    for (std::size_t i = 0; i < 9; ++i) CHECK(compose(p, q)[i] == p[q[i]]);
    // mat(compose(p, q)) == mat(q) * mat(p) on dense 0/1 matrices.
    CHECK(oracle::dense(compose(p, q).indices()) ==
          oracle::dense_product(oracle::dense(q.indices()), oracle::dense(p.indices())));
  }
  CHECK_THROWS_AS(compose(Permutation::identity(2), Permutation::identity(3)), ShapeError);
}

TEST_CASE("random permutations are reproducible from the seed") {
  std::mt19937_64 r1(42), r2(42);
  CHECK(Permutation::random(20, r1) == Permutation::random(20, r2));
}

TEST_CASE("frobenius inner product") {
  const Matrix i2 = Matrix::identity(2);
  CHECK(frobenius_inner(i2, i2) == 2.0);
  CHECK(frobenius_inner(Matrix(2, 2, {1, 2, 3, 4}), Matrix(2, 2)) == 0.0);
  CHECK(frobenius_inner(Matrix(2, 2, {1, 2, 3, 4}), i2) == 5.0);
  CHECK_THROWS_AS(frobenius_inner(Matrix(2, 2), Matrix(2, 3)), ShapeError);
  std::mt19937_64 rng(1);
  const Matrix a = oracle::random_matrix(3, 5, rng), b = oracle::random_matrix(3, 5, rng);
  CHECK(frobenius_inner(a, b) == doctest::Approx(frobenius_inner(b, a)).epsilon(1e-15));
  CHECK(frobenius_norm_squared(a) == doctest::Approx(frobenius_inner(a, a)).epsilon(1e-15));
}

TEST_CASE("matrix products agree with explicit transposes") {
  std::mt19937_64 rng(3);
  const Matrix a = oracle::random_matrix(4, 6, rng), b = oracle::random_matrix(5, 6, rng);
  const Matrix c = oracle::random_matrix(4, 3, rng);
  CHECK(oracle::max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))) < 1e-14);
  CHECK(oracle::max_abs_diff(matmul_tn(a, c), matmul(transpose(a), c)) < 1e-14);
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("row and column permutation") {
  const Matrix m(2, 2, {1, 2, 3, 4});
  const Permutation swap({1, 0});
  CHECK(permute_rows(m, swap) == Matrix(2, 2, {3, 4, 1, 2}));
  CHECK(permute_cols(m, swap) == Matrix(2, 2, {2, 1, 4, 3}));
  CHECK(permute_rows(m, Permutation::identity(2)) == m);
  CHECK_THROWS_AS(permute_rows(m, Permutation::identity(3)), ShapeError);
  CHECK_THROWS_AS(permute_cols(m, Permutation::identity(3)), ShapeError);

  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    const Matrix x = oracle::random_matrix(7, 5, rng);
    const Permutation pr = Permutation::random(7, rng), pc = Permutation::random(5, rng);
    // Index-level moves: exact equality, no tolerance.
    CHECK(permute_rows(permute_rows(x, pr), inverse(pr)) == x);
    CHECK(permute_cols(permute_cols(x, pc), inverse(pc)) == x);
    const Matrix y = permute_cols(permute_rows(x, pr), pc);
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 5; ++j) CHECK(y(i, j) == x(pr[i], pc[j]));
  }
}

TEST_CASE("vector p-norm") {
  const std::vector<double> a{2, 1}, b{3, 0};
  CHECK(vector_pnorm(a, a, 2.0) == 0.0);
  CHECK(vector_pnorm(a, b, 2.0) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
  CHECK(vector_pnorm(a, b, 1.0) == 2.0);
  CHECK(vector_pnorm(a, b, std::numeric_limits<double>::infinity()) == 1.0);
  CHECK(vector_pnorm(a, b, 3.0) == doctest::Approx(std::cbrt(2.0)).epsilon(1e-14));
  CHECK_THROWS_AS(vector_pnorm(a, b, 0.5), PreconditionError);
  const std::vector<double> c{1, 2, 3};
  CHECK_THROWS_AS(vector_pnorm(a, c, 2.0), ShapeError);
}

TEST_CASE("singular values of simple matrices") {
  const Matrix diag(2, 3, {2, 0, 0, 0, 1, 0});
  const auto s = singular_values(diag);
  REQUIRE(s.size() == 2);
  CHECK(s[0] == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(s[1] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(singular_values(Matrix(3, 3)) == std::vector<double>{0, 0, 0});
  CHECK(singular_values(transpose(diag)).size() == 2);
  CHECK_THROWS_AS(singular_values(Matrix()), PreconditionError);
}

TEST_CASE("singular values match the Gram eigenvalue oracle") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  for (int t = 0; t < 200; ++t) {
    const Matrix m = oracle::random_matrix(dim(rng), dim(rng), rng);
    const auto got = singular_values(m);
    const auto want = oracle::singular_values_via_gram(m);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i] >= 0.0);
      if (i > 0) CHECK(got[i] <= got[i - 1]);
      CHECK(std::abs(got[i] - want[i]) <= 1e-8);
    }
  }
}

TEST_CASE("singular values handle rank deficiency") {
  std::mt19937_64 rng(5);
  const Matrix u = oracle::random_matrix(6, 1, rng), v = oracle::random_matrix(1, 4, rng);
  const auto s = singular_values(matmul(u, v));
  CHECK(s[0] == doctest::Approx(std::sqrt(frobenius_norm_squared(u) * frobenius_norm_squared(v))));
  for (std::size_t i = 1; i < s.size(); ++i) CHECK(s[i] < 1e-12);
}

TEST_CASE("singular values are invariant to row and column permutations") {
  std::mt19937_64 rng(99);
  double worst = 0.0;
  for (int t = 0; t < 500; ++t) {
    const Matrix h = oracle::random_matrix(8, 32, rng);
    const Matrix g = permute_cols(permute_rows(h, Permutation::random(8, rng)),
                                  Permutation::random(32, rng));
    const auto a = singular_values(h), b = singular_values(g);
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  CHECK(worst <= 1e-10);
}
