#include <doctest.h>

#include <random>
#include <set>

#include "oracles.hpp"
#include "rebasin/errors.hpp"
#include "rebasin/perm_graph.hpp"
#include "rebasin/toy_transformer.hpp"

using namespace rebasin;

namespace {

const ArchSpec kArch{2, 4, 16, 24, 5, 3, true};

WeightSet random_weights(const ArchSpec& arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  WeightSet ws = WeightSet::zeros(arch);
  for (auto& [name, m] : ws.tensors) m = oracle::random_matrix(m.rows(), m.cols(), rng);
  return ws;
}

}  // namespace

TEST_CASE("variable counts for a single block") {
  const ArchSpec one{1, 2, 8, 12, 3, 2, false};
  const auto tie = build_coupling_graph(one, {ResidualMode::tie, false});
  CHECK(tie.variables.size() == 3);
  CHECK(tie.free_variables().size() == 3);
  const auto compose = build_coupling_graph(one, {ResidualMode::compose, true});
  CHECK(compose.variables.size() == 5);
  CHECK(compose.free_variables().size() == 4);
  CHECK(compose.variable("embed").pinned);
  CHECK_THROWS_AS(compose.variable("nope"), UnknownVariableError);
}

TEST_CASE("head split must be exact") {
  CHECK_THROWS_AS(build_coupling_graph(ArchSpec{1, 3, 8, 4, 1, 1, false}), PreconditionError);
}

TEST_CASE("wiring follows the documented rules") {
  for (auto mode : {ResidualMode::compose, ResidualMode::tie}) {
    const auto g = build_coupling_graph(kArch, {mode, true});
    CHECK_NOTHROW(g.validate());
    // Output head rows are never permuted.
    CHECK(g.application("head.weight", Axis::rows) == nullptr);
    CHECK(g.application("head.bias", Axis::rows) == nullptr);
    // Each tensor axis has at most one governing record.
    std::set<std::pair<std::string, Axis>> seen;
    for (const auto& a : g.applications) CHECK(seen.insert({a.tensor, a.axis}).second);

    for (std::size_t i = 0; i < kArch.n_blocks; ++i) {
      const auto& w = g.blocks[i];
      const std::string b = block_prefix(i);
      for (const char* t : {"q", "k", "v"}) {
        const std::string name = b + "attn." + t + ".weight";
        CHECK(g.application(name, Axis::rows)->variable == w.attn);
        CHECK(g.application(name, Axis::cols)->variable == w.input);
        CHECK(g.application(name, Axis::cols)->direction == Direction::inverse);
      }
      CHECK(g.application(b + "attn.out.weight", Axis::rows)->variable == w.attn_out);
      CHECK(g.application(b + "attn.out.weight", Axis::cols)->variable == w.attn);
      CHECK(g.application(b + "ln1.gain", Axis::rows)->variable == w.attn_out);
      CHECK(g.application(b + "mlp.fc1.weight", Axis::rows)->variable == w.mlp_hidden);
      CHECK(g.application(b + "mlp.fc1.weight", Axis::cols)->variable == w.attn_out);
      CHECK(g.application(b + "mlp.fc2.weight", Axis::rows)->variable == w.mlp_out);
      CHECK(g.application(b + "mlp.fc2.weight", Axis::cols)->variable == w.mlp_hidden);
      CHECK(g.application(b + "ln2.bias", Axis::rows)->variable == w.mlp_out);
      if (i > 0) CHECK(w.input == g.blocks[i - 1].mlp_out);
      if (mode == ResidualMode::tie) {
        CHECK(w.input == "stream");
        CHECK(w.attn_out == "stream");
        CHECK(w.mlp_out == "stream");
      }
    }
    CHECK(g.application("head.weight", Axis::cols)->variable == g.blocks.back().mlp_out);
    CHECK(g.application("embed.weight", Axis::rows)->variable == g.blocks.front().input);
  }
}

TEST_CASE("application table lists every record") {
  const auto g = build_coupling_graph(kArch);
  const std::string table = format_application_table(g);
  for (const auto& a : g.applications) CHECK(table.find(a.tensor) != std::string::npos);
}

TEST_CASE("identity assignment leaves weights unchanged") {
  const auto g = build_coupling_graph(kArch);
  const WeightSet ws = random_weights(kArch, 1);
  CHECK(apply_assignment(ws, g, identity_assignment(g)).tensors == ws.tensors);
}

TEST_CASE("apply then apply inverse restores the input exactly") {
  std::mt19937_64 rng(2);
  for (auto mode : {ResidualMode::compose, ResidualMode::tie}) {
    const auto g = build_coupling_graph(kArch, {mode, false});
    for (int t = 0; t < 10; ++t) {
      const WeightSet ws = random_weights(kArch, t);
      const auto pi = random_assignment(g, rng);
      const WeightSet moved = apply_assignment(ws, g, pi);
      CHECK(moved.tensors != ws.tensors);
      CHECK(apply_assignment(moved, g, inverse(pi)).tensors == ws.tensors);
    }
  }
}

TEST_CASE("application is linear and exact") {
  std::mt19937_64 rng(3);
  const auto g = build_coupling_graph(kArch, {ResidualMode::compose, false});
  const WeightSet a = random_weights(kArch, 10), ft = random_weights(kArch, 11);
  const auto pi = random_assignment(g, rng);
  CHECK(apply_assignment(subtract(ft, a), g, pi).tensors ==
        subtract(apply_assignment(ft, g, pi), apply_assignment(a, g, pi)).tensors);
  CHECK(apply_assignment(scale(a, 0.25), g, pi).tensors ==
        scale(apply_assignment(a, g, pi), 0.25).tensors);
}

TEST_CASE("pinned variables stay identity in random assignments") {
  std::mt19937_64 rng(4);
  const auto g = build_coupling_graph(kArch, {ResidualMode::compose, true});
  const auto pi = random_assignment(g, rng);
  CHECK(pi.at("embed").is_identity());
  CHECK_NOTHROW(validate_assignment(g, pi));
  REQUIRE(pi.block("block.1.attn") != nullptr);
  CHECK(pi.block("block.1.attn")->flattened() == pi.at("block.1.attn"));
}

TEST_CASE("assignment validation") {
  const auto g = build_coupling_graph(kArch);
  PermutationAssignment pi = identity_assignment(g);
  CHECK_NOTHROW(validate_assignment(g, pi));

  PermutationAssignment missing;
  for (const auto& [id, p] : pi.entries())
    if (id != "block.0.mlp_hidden") missing.set(id, p);
  CHECK_THROWS_AS(validate_assignment(g, missing), IncompleteAssignmentError);
  CHECK_THROWS_AS(apply_assignment(WeightSet::zeros(kArch), g, missing), IncompleteAssignmentError);

  PermutationAssignment extra = pi;
  extra.set("block.9.attn", Permutation::identity(16));
  CHECK_THROWS_AS(validate_assignment(g, extra), UnknownVariableError);

  PermutationAssignment wrong = pi;
  wrong.set("block.0.mlp_hidden", Permutation::identity(5));
  CHECK_THROWS_AS(validate_assignment(g, wrong), ShapeError);
}

TEST_CASE("residual compositions") {
  std::mt19937_64 rng(5);
  const auto g = build_coupling_graph(kArch, {ResidualMode::compose, false});
  const auto pi = random_assignment(g, rng);
  const auto skips = residual_permutations(g, pi);
  REQUIRE(skips.size() == kArch.n_blocks);
  for (std::size_t i = 0; i < kArch.n_blocks; ++i) {
    const auto& w = g.blocks[i];
    CHECK(skips[i].attn_skip == compose(inverse(pi.at(w.input)), pi.at(w.attn_out)));
    CHECK(skips[i].mlp_skip == compose(inverse(pi.at(w.attn_out)), pi.at(w.mlp_out)));
  }
  const auto tie = build_coupling_graph(kArch, {ResidualMode::tie, false});
  for (const auto& s : residual_permutations(tie, random_assignment(tie, rng))) {
    CHECK(s.attn_skip.is_identity());
    CHECK(s.mlp_skip.is_identity());
  }
}

TEST_CASE("block permutation flattening matches the dense Kronecker sum") {
  std::mt19937_64 rng(6);
  for (std::size_t h = 1; h <= 4; ++h) {
    for (std::size_t dk = 1; dk <= 4; ++dk) {
      for (int t = 0; t < 5; ++t) {
        const auto bp = BlockPermutation::random(h, dk, rng);
        std::vector<std::vector<std::size_t>> intra;
        for (const auto& p : bp.intra) intra.push_back(p.indices());
        CHECK(bp.flattened().indices() ==
              oracle::indices_of(oracle::kronecker_block(bp.inter.indices(), intra)));
        CHECK(compose(bp.flattened(), inverse(bp).flattened()).is_identity());
      }
    }
  }
  BlockPermutation swap{Permutation({1, 0}), {Permutation::identity(2), Permutation::identity(2)}};
  CHECK(swap.flattened() == Permutation({2, 3, 0, 1}));
  BlockPermutation bad{Permutation({1, 0}), {Permutation::identity(2), Permutation::identity(3)}};
  CHECK_THROWS(bad.validate());
}

TEST_CASE("residual mode names") {
  CHECK(parse_residual_mode("tie") == ResidualMode::tie);
  CHECK(to_string(ResidualMode::compose) == "compose");
  CHECK_THROWS_AS(parse_residual_mode("both"), PreconditionError);
}
