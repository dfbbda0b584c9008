#include "rebasin/toy_transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "rebasin/errors.hpp"

namespace rebasin {

namespace {

constexpr double kLayerNormEps = 1e-5;

struct BlockParams {
  const Matrix *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  const Matrix *g1 = nullptr, *c1 = nullptr, *g2 = nullptr, *c2 = nullptr;
  const Matrix *w1, *b1, *w2, *b2;
};

template <class Tag>
struct BlockRefs {
  Matrix *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  Matrix *g1 = nullptr, *c1 = nullptr, *g2 = nullptr, *c2 = nullptr;
  Matrix *w1, *b1, *w2, *b2;
};

template <class P, class Ws>
P block_params(Ws& ws, std::size_t i) {
  const std::string b = block_prefix(i);
  P p{};
  p.wq = &ws.at(b + "attn.q.weight");
  p.bq = &ws.at(b + "attn.q.bias");
  p.wk = &ws.at(b + "attn.k.weight");
  p.bk = &ws.at(b + "attn.k.bias");
  p.wv = &ws.at(b + "attn.v.weight");
  p.bv = &ws.at(b + "attn.v.bias");
  p.wo = &ws.at(b + "attn.out.weight");
  p.bo = &ws.at(b + "attn.out.bias");
  if (ws.arch.has_layernorm) {
    p.g1 = &ws.at(b + "ln1.gain");
    p.c1 = &ws.at(b + "ln1.bias");
    p.g2 = &ws.at(b + "ln2.gain");
    p.c2 = &ws.at(b + "ln2.bias");
  }
  p.w1 = &ws.at(b + "mlp.fc1.weight");
  p.b1 = &ws.at(b + "mlp.fc1.bias");
  p.w2 = &ws.at(b + "mlp.fc2.weight");
  p.b2 = &ws.at(b + "mlp.fc2.bias");
  return p;
}

// x W^T + b for token rows x.
Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y = matmul_nt(x, w);
  for (std::size_t s = 0; s < y.rows(); ++s) {
    auto r = y.row(s);
    for (std::size_t o = 0; o < y.cols(); ++o) r[o] += b(o, 0);
  }
  return y;
}

// dW += dY^T X, db += column sums of dY; returns dX = dY W.
Matrix linear_backward(const Matrix& dy, const Matrix& x, const Matrix& w, Matrix& dw,
                       Matrix& db) {
  dw += matmul_tn(dy, x);
  for (std::size_t s = 0; s < dy.rows(); ++s)
    for (std::size_t o = 0; o < dy.cols(); ++o) db(o, 0) += dy(s, o);
  return matmul(dy, w);
}

struct LayerNormCache {
  Matrix xhat;
  std::vector<double> inv_std;
};

Matrix layer_norm(const Matrix& u, const Matrix& gain, const Matrix& bias, LayerNormCache* cache) {
  const std::size_t d = u.cols();
  Matrix y(u.rows(), d);
  if (cache) {
    cache->xhat = Matrix(u.rows(), d);
    cache->inv_std.assign(u.rows(), 0.0);
  }
  for (std::size_t s = 0; s < u.rows(); ++s) {
    auto r = u.row(s);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = (r[c] - mean) * inv;
      y(s, c) = gain(c, 0) * xh + bias(c, 0);
      if (cache) cache->xhat(s, c) = xh;
    }
    if (cache) cache->inv_std[s] = inv;
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const LayerNormCache& cache, const Matrix& gain,
                           Matrix& dgain, Matrix& dbias) {
  const std::size_t d = dy.cols();
  Matrix du(dy.rows(), d);
  for (std::size_t s = 0; s < dy.rows(); ++s) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double dxhat = dy(s, c) * gain(c, 0);
      dgain(c, 0) += dy(s, c) * cache.xhat(s, c);
      dbias(c, 0) += dy(s, c);
      mean_dxhat += dxhat;
      mean_dxhat_xhat += dxhat * cache.xhat(s, c);
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) {
      const double dxhat = dy(s, c) * gain(c, 0);
      du(s, c) = cache.inv_std[s] * (dxhat - mean_dxhat - cache.xhat(s, c) * mean_dxhat_xhat);
    }
  }
  return du;
}

struct BlockCache {
  Matrix x, q, k, v, o, zi, hpre, hact;
  std::vector<Matrix> att;
  LayerNormCache ln1, ln2;
};

struct SequenceCache {
  Matrix embedded;
  std::vector<BlockCache> blocks;
  std::vector<double> pooled;
};

void require_finite(const Matrix& m, std::size_t block, const char* where) {
  if (!m.all_finite()) {
    throw NumericalError("non-finite " + std::string(where) + " in block " +
                         std::to_string(block));
  }
}

Matrix run_block(const BlockParams& p, const Matrix& x, std::size_t n_heads,
                 const ResidualPermutations* skip, std::size_t block, BlockCache* cache) {
  const std::size_t seq = x.rows();
  const std::size_t dm = x.cols();
  const std::size_t dk = dm / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  Matrix q = linear(x, *p.wq, *p.bq);
  Matrix k = linear(x, *p.wk, *p.bk);
  Matrix v = linear(x, *p.wv, *p.bv);
  Matrix o(seq, dm);
  std::vector<Matrix> att;
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
        o(s, h * dk + c) = acc;
      }
    if (cache) att.push_back(std::move(a));
  }

  Matrix u1 = linear(o, *p.wo, *p.bo);
  u1 += skip ? permute_cols(x, skip->attn_skip) : x;
  Matrix zi = p.g1 ? layer_norm(u1, *p.g1, *p.c1, cache ? &cache->ln1 : nullptr) : std::move(u1);
  require_finite(zi, block, "attention output");

  Matrix hpre = linear(zi, *p.w1, *p.b1);
  Matrix hact = hpre;
  for (double& val : hact.data()) val = std::max(val, 0.0);
  Matrix u2 = linear(hact, *p.w2, *p.b2);
  u2 += skip ? permute_cols(zi, skip->mlp_skip) : zi;
  Matrix zout = p.g2 ? layer_norm(u2, *p.g2, *p.c2, cache ? &cache->ln2 : nullptr) : std::move(u2);
  require_finite(zout, block, "block output");

  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->o = std::move(o);
    cache->att = std::move(att);
    cache->zi = std::move(zi);
    cache->hpre = std::move(hpre);
    cache->hact = std::move(hact);
  }
  return zout;
}

std::vector<double> run_sequence(const WeightSet& ws, const std::vector<BlockParams>& blocks,
                                 const Matrix& input, const ResidualSkips* skips,
                                 SequenceCache* cache) {
  const ArchSpec& arch = ws.arch;
  if (input.cols() != arch.input_dim || input.rows() == 0) {
    throw ShapeError("input sequence must be S x " + std::to_string(arch.input_dim));
  }
  Matrix x = linear(input, ws.at("embed.weight"), ws.at("embed.bias"));
  if (cache) {
    cache->embedded = x;
    cache->blocks.resize(blocks.size());
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    x = run_block(blocks[i], x, arch.n_heads, skips ? &(*skips)[i] : nullptr, i,
                  cache ? &cache->blocks[i] : nullptr);
  }
  std::vector<double> pooled(arch.embed_dim, 0.0);
  for (std::size_t s = 0; s < x.rows(); ++s)
    for (std::size_t c = 0; c < x.cols(); ++c) pooled[c] += x(s, c);
  for (double& v : pooled) v /= static_cast<double>(x.rows());

  const Matrix& wh = ws.at("head.weight");
  const Matrix& bh = ws.at("head.bias");
  std::vector<double> logits(arch.output_dim);
  for (std::size_t o = 0; o < arch.output_dim; ++o) {
    double acc = bh(o, 0);
    for (std::size_t c = 0; c < arch.embed_dim; ++c) acc += wh(o, c) * pooled[c];
    logits[o] = acc;
  }
  if (cache) cache->pooled = std::move(pooled);
  return logits;
}

std::vector<BlockParams> all_block_params(const WeightSet& ws) {
  std::vector<BlockParams> out;
  for (std::size_t i = 0; i < ws.arch.n_blocks; ++i) out.push_back(block_params<BlockParams>(ws, i));
  return out;
}

void check_skips(const WeightSet& ws, const ResidualSkips* skips) {
  if (!skips) return;
  if (skips->size() != ws.arch.n_blocks) {
    throw ShapeError("residual permutations given for " + std::to_string(skips->size()) +
                     " blocks, model has " + std::to_string(ws.arch.n_blocks));
  }
  for (const auto& s : *skips) {
    if (s.attn_skip.size() != ws.arch.embed_dim || s.mlp_skip.size() != ws.arch.embed_dim) {
      throw ShapeError("residual permutation size does not match embed_dim");
    }
  }
}

std::vector<double> softmax(const std::vector<double>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

void backward_block(const BlockParams& p, BlockRefs<GradientTag>& g, const BlockCache& c,
                    Matrix dzout, std::size_t n_heads, Matrix& dx) {
  const std::size_t seq = c.x.rows();
  const std::size_t dm = c.x.cols();
  const std::size_t dk = dm / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  Matrix du2 = p.g2 ? layer_norm_backward(dzout, c.ln2, *p.g2, *g.g2, *g.c2) : std::move(dzout);
  Matrix dzi = du2;  // skip branch
  Matrix dhact = linear_backward(du2, c.hact, *p.w2, *g.w2, *g.b2);
  for (std::size_t e = 0; e < dhact.size(); ++e) {
    if (c.hpre.data()[e] <= 0.0) dhact.data()[e] = 0.0;
  }
  dzi += linear_backward(dhact, c.zi, *p.w1, *g.w1, *g.b1);

  Matrix du1 = p.g1 ? layer_norm_backward(dzi, c.ln1, *p.g1, *g.g1, *g.c1) : std::move(dzi);
  dx = du1;  // skip branch
  Matrix dout = linear_backward(du1, c.o, *p.wo, *g.wo, *g.bo);

  Matrix dq(seq, dm), dk_(seq, dm), dv(seq, dm);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Matrix& a = c.att[h];
    Matrix da(seq, seq);
    for (std::size_t s = 0; s < seq; ++s)
      for (std::size_t t = 0; t < seq; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < dk; ++j) acc += dout(s, h * dk + j) * c.v(t, h * dk + j);
        da(s, t) = acc;
      }
    for (std::size_t t = 0; t < seq; ++t)
      for (std::size_t j = 0; j < dk; ++j) {
        double acc = 0.0;
        for (std::size_t s = 0; s < seq; ++s) acc += a(s, t) * dout(s, h * dk + j);
        dv(t, h * dk + j) = acc;
      }
    // Softmax Jacobian, then through the scaled dot product.
    Matrix dscore(seq, seq);
    for (std::size_t s = 0; s < seq; ++s) {
      double dot = 0.0;
      for (std::size_t t = 0; t < seq; ++t) dot += da(s, t) * a(s, t);
      for (std::size_t t = 0; t < seq; ++t) dscore(s, t) = a(s, t) * (da(s, t) - dot) * inv_sqrt;
    }
    for (std::size_t s = 0; s < seq; ++s)
      for (std::size_t j = 0; j < dk; ++j) {
        double accq = 0.0, acck = 0.0;
        for (std::size_t t = 0; t < seq; ++t) {
          accq += dscore(s, t) * c.k(t, h * dk + j);
          acck += dscore(t, s) * c.q(t, h * dk + j);
        }
        dq(s, h * dk + j) = accq;
        dk_(s, h * dk + j) = acck;
      }
  }
  dx += linear_backward(dq, c.x, *p.wq, *g.wq, *g.bq);
  dx += linear_backward(dk_, c.x, *p.wk, *g.wk, *g.bk);
  dx += linear_backward(dv, c.x, *p.wv, *g.wv, *g.bv);
}

}  // namespace

Matrix forward(const WeightSet& ws, const std::vector<Matrix>& inputs, const ResidualSkips* skips) {
  check_skips(ws, skips);
  const auto blocks = all_block_params(ws);
  Matrix out(inputs.size(), ws.arch.output_dim);
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    const auto logits = run_sequence(ws, blocks, inputs[n], skips, nullptr);
    std::copy(logits.begin(), logits.end(), out.row(n).begin());
  }
  return out;
}

double cross_entropy(const Matrix& logits, const std::vector<std::size_t>& targets) {
  if (logits.rows() != targets.size() || targets.empty()) {
    throw ShapeError("cross_entropy: logits and targets disagree");
  }
  double total = 0.0;
  for (std::size_t n = 0; n < logits.rows(); ++n) {
    auto r = logits.row(n);
    if (targets[n] >= r.size()) throw PreconditionError("cross_entropy: label out of range");
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - mx);
    total += mx + std::log(z) - r[targets[n]];
  }
  return total / static_cast<double>(logits.rows());
}

double loss(const WeightSet& ws, const EvalBatch& batch, const ResidualSkips* skips) {
  batch.validate(ws.arch.output_dim);
  return cross_entropy(forward(ws, batch.inputs, skips), batch.targets);
}

LossAndGradient loss_and_gradient(const WeightSet& ws, const EvalBatch& batch) {
  batch.validate(ws.arch.output_dim);
  const ArchSpec& arch = ws.arch;
  const auto blocks = all_block_params(ws);
  LossAndGradient out;
  out.gradient = Gradient::zeros(arch);
  Gradient& grad = out.gradient;
  std::vector<BlockRefs<GradientTag>> gblocks;
  for (std::size_t i = 0; i < arch.n_blocks; ++i) {
    gblocks.push_back(block_params<BlockRefs<GradientTag>>(grad, i));
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const Matrix& wh = ws.at("head.weight");

  for (std::size_t n = 0; n < batch.size(); ++n) {
    SequenceCache cache;
    const auto logits = run_sequence(ws, blocks, batch.inputs[n], nullptr, &cache);
    auto prob = softmax(logits);
    out.loss -= std::log(std::max(prob[batch.targets[n]], std::numeric_limits<double>::min())) * inv_n;

    std::vector<double> dlogits = prob;
    dlogits[batch.targets[n]] -= 1.0;
    for (double& v : dlogits) v *= inv_n;

    Matrix& gwh = grad.at("head.weight");
    Matrix& gbh = grad.at("head.bias");
    std::vector<double> dpooled(arch.embed_dim, 0.0);
    for (std::size_t o = 0; o < arch.output_dim; ++o) {
      gbh(o, 0) += dlogits[o];
      for (std::size_t c = 0; c < arch.embed_dim; ++c) {
        gwh(o, c) += dlogits[o] * cache.pooled[c];
        dpooled[c] += dlogits[o] * wh(o, c);
      }
    }
    const std::size_t seq = batch.inputs[n].rows();
    Matrix dx(seq, arch.embed_dim);
    for (std::size_t s = 0; s < seq; ++s)
      for (std::size_t c = 0; c < arch.embed_dim; ++c) dx(s, c) = dpooled[c] / static_cast<double>(seq);

    for (std::size_t i = arch.n_blocks; i-- > 0;) {
      Matrix dprev;
      backward_block(blocks[i], gblocks[i], cache.blocks[i], std::move(dx), arch.n_heads, dprev);
      dx = std::move(dprev);
    }
    linear_backward(dx, batch.inputs[n], ws.at("embed.weight"), grad.at("embed.weight"),
                    grad.at("embed.bias"));
  }
  return out;
}

WeightSet init_random(const ArchSpec& arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  WeightSet ws = WeightSet::zeros(arch);
  for (const auto& spec : canonical_layout(arch)) {
    Matrix& m = ws.at(spec.name);
    if (spec.is_matrix()) {
      std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(spec.shape[1])));
      for (double& v : m.data()) v = dist(rng);
    } else if (spec.name.ends_with(".gain")) {
      for (double& v : m.data()) v = 1.0;
    }
  }
  return ws;
}

WeightSet train_toy(const WeightSet& ws, const EvalBatch& batch, std::size_t steps, double lr) {
  WeightSet cur = ws;
  for (std::size_t step = 0; step < steps; ++step) {
    LossAndGradient lg;
    try {
      lg = loss_and_gradient(cur, batch);
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(lg.loss)) {
      throw NumericalError("training diverged at step " + std::to_string(step) +
                           ": loss is not finite");
    }
    for (auto& [name, m] : cur.tensors) {
      const Matrix& g = lg.gradient.at(name);
      for (std::size_t e = 0; e < m.size(); ++e) m.data()[e] -= lr * g.data()[e];
    }
  }
  return cur;
}

EvalBatch random_batch(std::size_t n, std::size_t seq_len, std::size_t input_dim,
                       std::size_t output_dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> label(0, output_dim - 1);
  EvalBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix x(seq_len, input_dim);
    for (double& v : x.data()) v = normal(rng);
    b.inputs.push_back(std::move(x));
    b.targets.push_back(label(rng));
  }
  return b;
}

EvalBatch synthetic_task(const ArchSpec& arch, std::size_t n, std::size_t seq_len,
                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix teacher(arch.output_dim, arch.input_dim);
  for (double& v : teacher.data()) v = normal(rng);
  EvalBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix x(seq_len, arch.input_dim);
    for (double& v : x.data()) v = normal(rng);
    std::vector<double> mean(arch.input_dim, 0.0);
    for (std::size_t s = 0; s < seq_len; ++s)
      for (std::size_t c = 0; c < arch.input_dim; ++c) mean[c] += x(s, c) / static_cast<double>(seq_len);
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t o = 0; o < arch.output_dim; ++o) {
      double score = 0.0;
      for (std::size_t c = 0; c < arch.input_dim; ++c) score += teacher(o, c) * mean[c];
      if (score > best_score) {
        best_score = score;
        best = o;
      }
    }
    b.inputs.push_back(std::move(x));
    b.targets.push_back(best);
  }
  return b;
}

EquivalenceReport verify_equivalence(const WeightSet& ws, const CouplingGraph& g,
                                     const PermutationAssignment& pi,
                                     const EquivalenceOptions& opts) {
  require_same_arch(ws.arch, g.arch);
  const WeightSet permuted = apply_assignment(ws, g, pi);
  ResidualSkips skips;
  const ResidualSkips* skip_ptr = nullptr;
  if (g.mode == ResidualMode::compose) {
    skips = residual_permutations(g, pi);
    skip_ptr = &skips;
  }
  std::mt19937_64 rng(opts.seed);
  EquivalenceReport rep;
  for (std::size_t sample = 0; sample < opts.n_samples; ++sample) {
    const EvalBatch b = random_batch(opts.batch_size, opts.seq_len, ws.arch.input_dim,
                                     ws.arch.output_dim, rng);
    const Matrix ref = forward(ws, b.inputs);
    const Matrix got = forward(permuted, b.inputs, skip_ptr);
    for (std::size_t e = 0; e < ref.size(); ++e) {
      rep.max_dev = std::max(rep.max_dev, std::abs(ref.data()[e] - got.data()[e]));
    }
  }
  rep.pass = rep.max_dev <= opts.tol;
  return rep;
}

LmcCurve lmc_curve(const WeightSet& left, const WeightSet& right, const EvalBatch& batch,
                   std::size_t n_points, const ResidualSkips* skips) {
  require_same_arch(left.arch, right.arch);
  if (n_points < 2) throw PreconditionError("lmc_curve needs at least 2 points");
  LmcCurve curve;
  for (std::size_t i = 0; i < n_points; ++i) {
    const double alpha =
        i + 1 == n_points ? 1.0 : static_cast<double>(i) / static_cast<double>(n_points - 1);
    curve.alphas.push_back(alpha);
    curve.losses.push_back(loss(interpolate(left, right, alpha), batch, skips));
  }
  return curve;
}

std::string format_lmc_csv(const LmcCurve& curve) {
  std::ostringstream os;
  os.precision(17);
  os << "alpha,loss\n";
  for (std::size_t i = 0; i < curve.alphas.size(); ++i) {
    os << curve.alphas[i] << ',' << curve.losses[i] << '\n';
  }
  return os.str();
}

}  // namespace rebasin
