#include "rebasin/attention_align.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rebasin/errors.hpp"
#include "rebasin/lap.hpp"

namespace rebasin {

namespace {

void require_square_projection(const Matrix& w, const char* name, std::size_t dm) {
  if (w.rows() != dm || w.cols() != dm) {
    throw ShapeError(std::string("attention projection ") + name + " must be " +
                     std::to_string(dm) + "x" + std::to_string(dm));
  }
}

void require_compatible(const AttentionWeights& a, const AttentionWeights& b,
                        std::size_t n_heads) {
  const std::size_t dm = a.q.rows();
  for (const AttentionWeights* w : {&a, &b}) {
    require_square_projection(w->q, "q", dm);
    require_square_projection(w->k, "k", dm);
    require_square_projection(w->v, "v", dm);
  }
  if (n_heads == 0 || dm % n_heads != 0) {
    throw PreconditionError("embed dim " + std::to_string(dm) + " not divisible by " +
                            std::to_string(n_heads) + " heads");
  }
}

}  // namespace

std::vector<Matrix> split_heads(const Matrix& w, std::size_t n_heads) {
  if (n_heads == 0 || w.rows() % n_heads != 0) {
    throw PreconditionError("split_heads: " + std::to_string(w.rows()) +
                            " rows not divisible by " + std::to_string(n_heads) + " heads");
  }
  const std::size_t dk = w.rows() / n_heads;
  std::vector<Matrix> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Matrix head(dk, w.cols());
    for (std::size_t r = 0; r < dk; ++r) {
      auto src = w.row(h * dk + r);
      std::copy(src.begin(), src.end(), head.row(r).begin());
    }
    heads.push_back(std::move(head));
  }
  return heads;
}

double spectral_head_distance(const Matrix& head_a, const Matrix& head_b, double p) {
  if (head_a.rows() != head_b.rows() || head_a.cols() != head_b.cols()) {
    throw ShapeError("spectral_head_distance: heads have different shapes");
  }
  const auto sa = singular_values(head_a);
  const auto sb = singular_values(head_b);
  return vector_pnorm(sa, sb, p);
}

Matrix inter_head_distance_matrix(const AttentionWeights& b, const AttentionWeights& a,
                                  std::size_t n_heads, double p) {
  require_compatible(a, b, n_heads);
  // 6H SVDs up front; D only combines spectra.
  using Spectra = std::vector<std::vector<double>>;
  auto spectra = [n_heads](const Matrix& w) {
    Spectra out;
    for (const auto& h : split_heads(w, n_heads)) out.push_back(singular_values(h));
    return out;
  };
  const Spectra bq = spectra(b.q), bk = spectra(b.k), bv = spectra(b.v);
  const Spectra aq = spectra(a.q), ak = spectra(a.k), av = spectra(a.v);
  Matrix d(n_heads, n_heads);
  for (std::size_t i = 0; i < n_heads; ++i) {
    for (std::size_t j = 0; j < n_heads; ++j) {
      d(i, j) = vector_pnorm(bq[i], aq[j], p) + vector_pnorm(bk[i], ak[j], p) +
                vector_pnorm(bv[i], av[j], p);
    }
  }
  return d;
}

BlockPermutation align_heads(const AttentionWeights& a, const AttentionWeights& b,
                             std::size_t n_heads, const AlignOptions& opts) {
  require_compatible(a, b, n_heads);
  const std::size_t dm = a.q.rows();
  const std::size_t dk = dm / n_heads;
  if ((opts.out_a == nullptr) != (opts.out_b == nullptr)) {
    throw PreconditionError("align_heads: output-projection coupling needs both models");
  }

  BlockPermutation bp;
  bp.inter = solve_min(inter_head_distance_matrix(b, a, n_heads, opts.p_norm)).perm;

  const Matrix* projections_a[] = {&a.q, &a.k, &a.v};
  const Matrix* projections_b[] = {&b.q, &b.k, &b.v};
  bp.intra.reserve(n_heads);
  for (std::size_t i = 0; i < n_heads; ++i) {
    const std::size_t j = bp.inter[i];
    Matrix value(dk, dk);
    for (int t = 0; t < 3; ++t) {
      const Matrix& wa = *projections_a[t];
      const Matrix& wb = *projections_b[t];
      for (std::size_t r = 0; r < dk; ++r) {
        auto rb = wb.row(i * dk + r);
        for (std::size_t c = 0; c < dk; ++c) {
          auto ra = wa.row(j * dk + c);
          double s = 0.0;
          for (std::size_t x = 0; x < dm; ++x) s += rb[x] * ra[x];
          value(r, c) += s;
        }
      }
    }
    if (opts.out_a != nullptr) {
      const Matrix& oa = *opts.out_a;
      const Matrix& ob = *opts.out_b;
      for (std::size_t row = 0; row < ob.rows(); ++row) {
        for (std::size_t r = 0; r < dk; ++r) {
          const double vb = ob(row, i * dk + r);
          for (std::size_t c = 0; c < dk; ++c) value(r, c) += vb * oa(row, j * dk + c);
        }
      }
    }
    bp.intra.push_back(solve_max(value).perm);
  }
  return bp;
}

std::optional<BlockPermutation> as_block_permutation(const Permutation& flat,
                                                     std::size_t n_heads) {
  if (n_heads == 0 || flat.size() % n_heads != 0) return std::nullopt;
  const std::size_t dk = flat.size() / n_heads;
  BlockPermutation bp;
  std::vector<std::size_t> inter(n_heads);
  for (std::size_t i = 0; i < n_heads; ++i) {
    const std::size_t src = flat[i * dk] / dk;
    std::vector<std::size_t> intra(dk);
    for (std::size_t r = 0; r < dk; ++r) {
      const std::size_t s = flat[i * dk + r];
      if (s / dk != src) return std::nullopt;
      intra[r] = s % dk;
    }
    inter[i] = src;
    bp.intra.emplace_back(std::move(intra));
  }
  bp.inter = Permutation(std::move(inter));
  return bp;
}

Matrix multi_head_attention(const AttentionWeights& w, std::size_t n_heads, const Matrix& x,
                            std::vector<Matrix>* scores) {
  const std::size_t dm = w.q.rows();
  if (n_heads == 0 || dm % n_heads != 0) throw PreconditionError("bad head count");
  if (x.cols() != w.q.cols()) throw ShapeError("attention input width mismatch");
  const std::size_t dk = dm / n_heads;
  const std::size_t seq = x.rows();
  const Matrix q = matmul_nt(x, w.q);
  const Matrix k = matmul_nt(x, w.k);
  const Matrix v = matmul_nt(x, w.v);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  Matrix out(seq, dm);
  if (scores) scores->clear();
  for (std::size_t h = 0; h < n_heads; ++h) {
    Matrix a(seq, seq);
    for (std::size_t s = 0; s < seq; ++s) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < seq; ++t) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dk; ++c) dot += q(s, h * dk + c) * k(t, h * dk + c);
        a(s, t) = dot * inv_sqrt;
        mx = std::max(mx, a(s, t));
      }
      double z = 0.0;
      for (std::size_t t = 0; t < seq; ++t) {
        a(s, t) = std::exp(a(s, t) - mx);
        z += a(s, t);
      }
      for (std::size_t t = 0; t < seq; ++t) a(s, t) /= z;
    }
    for (std::size_t s = 0; s < seq; ++s)
      for (std::size_t c = 0; c < dk; ++c) {
        double acc = 0.0;
        for (std::size_t t = 0; t < seq; ++t) acc += a(s, t) * v(t, h * dk + c);
        out(s, h * dk + c) = acc;
      }
    if (scores) scores->push_back(std::move(a));
  }
  return out;
}

EquivarianceReport verify_attention_equivariance(const AttentionWeights& w,
                                                 const Permutation& perm,
                                                 std::size_t n_heads, const Matrix& x,
                                                 double tol) {
  require_compatible(w, w, n_heads);
  if (perm.size() != w.q.rows()) throw ShapeError("permutation size does not match d_m");
  if (!x.all_finite()) throw NonFiniteError("attention input is not finite");

  std::vector<Matrix> scores, scores_permuted;
  const Matrix o = multi_head_attention(w, n_heads, x, &scores);
  const AttentionWeights wp{permute_rows(w.q, perm), permute_rows(w.k, perm),
                            permute_rows(w.v, perm)};
  const Matrix op = multi_head_attention(wp, n_heads, x, &scores_permuted);

  EquivarianceReport rep;
  const Matrix expected = permute_cols(o, perm);
  for (std::size_t i = 0; i < o.size(); ++i) {
    rep.max_abs_deviation =
        std::max(rep.max_abs_deviation, std::abs(op.data()[i] - expected.data()[i]));
  }
  if (auto bp = as_block_permutation(perm, n_heads)) {
    double dev = 0.0;
    for (std::size_t i = 0; i < n_heads; ++i) {
      const Matrix& a = scores_permuted[i];
      const Matrix& ref = scores[bp->inter[i]];
      for (std::size_t e = 0; e < a.size(); ++e) {
        dev = std::max(dev, std::abs(a.data()[e] - ref.data()[e]));
      }
    }
    rep.max_score_deviation = dev;
  }
  rep.pass = rep.max_abs_deviation <= tol;
  return rep;
}

}  // namespace rebasin
