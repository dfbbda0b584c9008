#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "rebasin/errors.hpp"
#include "rebasin/toy_transformer.hpp"
#include "rebasin/transport.hpp"
#include "rebasin/weight_matching.hpp"

using namespace rebasin;

namespace {

const ArchSpec kArch{3, 2, 8, 12, 4, 3, true};

WeightSet random_weights(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  WeightSet ws = WeightSet::zeros(kArch);
  for (auto& [name, m] : ws.tensors) m = oracle::random_matrix(m.rows(), m.cols(), rng);
  return ws;
}

}  // namespace

TEST_CASE("task vectors") {
  const WeightSet base = random_weights(1), ft = random_weights(2);
  for (const auto& [name, m] : compute_task_vector(base, base).tensors)
    for (double v : m.data()) CHECK(v == 0.0);
  const TaskVector tau = compute_task_vector(ft, base);
  const Matrix& d = tau.at("block.1.mlp.fc2.weight");
  CHECK(d(2, 3) == ft.at("block.1.mlp.fc2.weight")(2, 3) - base.at("block.1.mlp.fc2.weight")(2, 3));

  ArchSpec other = kArch;
  other.mlp_hidden = 10;
  CHECK_THROWS_AS(compute_task_vector(WeightSet::zeros(other), base), ArchMismatchError);
}

TEST_CASE("scaling specs") {
  CHECK_THROWS_AS(ScalingSpec::scalar(-0.1), PreconditionError);
  CHECK_THROWS_AS(ScalingSpec::scalar(std::numeric_limits<double>::quiet_NaN()), PreconditionError);
  CHECK_THROWS_AS(ScalingSpec::per_block({1.0, -1.0}), PreconditionError);
  const auto s = ScalingSpec::per_block({0.1, 0.2, 0.3});
  CHECK(s.for_tensor(kArch, "embed.weight") == 0.1);
  CHECK(s.for_tensor(kArch, "block.1.attn.q.bias") == 0.2);
  CHECK(s.for_tensor(kArch, "head.weight") == 0.3);
  CHECK_THROWS_AS(ScalingSpec::per_block({1.0, 2.0}).for_tensor(kArch, "head.weight"),
                  PreconditionError);
}

TEST_CASE("transport algebra") {
  std::mt19937_64 rng(3);
  const auto g = build_coupling_graph(kArch);
  const WeightSet base = random_weights(4), a = random_weights(5), ft = random_weights(6);
  const TaskVector tau = compute_task_vector(ft, a);
  const auto pi = random_assignment(g, rng);

  CHECK(transport(base, tau, pi, g, ScalingSpec::scalar(0.0)).tensors == base.tensors);
  CHECK(transport(base, tau, identity_assignment(g), g, ScalingSpec::scalar(1.0)).tensors ==
        add(base, retag<WeightTag>(tau)).tensors);

  const TaskVector moved = apply_assignment(tau, g, pi);
  CHECK(moved.tensors ==
        retag<TaskVectorTag>(subtract(apply_assignment(ft, g, pi), apply_assignment(a, g, pi))).tensors);

  const WeightSet t = transport(base, tau, pi, g, ScalingSpec::scalar(0.7));
  for (const auto& [name, m] : t.tensors)
    for (std::size_t k = 0; k < m.size(); ++k)
      CHECK(m.data()[k] == base.at(name).data()[k] + 0.7 * moved.at(name).data()[k]);

  const auto per = ScalingSpec::per_block({0.0, 1.0, 2.0});
  const WeightSet tp = transport(base, tau, pi, g, per);
  CHECK(tp.at("embed.weight") == base.at("embed.weight"));
  CHECK(tp.at("block.0.mlp.fc1.weight") == base.at("block.0.mlp.fc1.weight"));
  CHECK(tp.at("head.bias") == base.at("head.bias") + 2.0 * moved.at("head.bias"));
}

TEST_CASE("transport never re-runs the matcher") {
  std::mt19937_64 rng(7);
  const auto g = build_coupling_graph(kArch);
  const auto pi = random_assignment(g, rng);
  const auto before = weight_match_call_count();
  const WeightSet base = random_weights(8);
  for (int k = 0; k < 4; ++k)
    (void)transport(base, compute_task_vector(random_weights(20 + k), random_weights(30 + k)), pi, g,
                    ScalingSpec::scalar(1.0));
  CHECK(weight_match_call_count() == before);
}

TEST_CASE("merging task vectors") {
  std::mt19937_64 rng(9);
  const auto g = build_coupling_graph(kArch);
  const TaskVector t1 = compute_task_vector(random_weights(10), random_weights(11));
  const TaskVector t2 = compute_task_vector(random_weights(12), random_weights(13));
  CHECK(merge_task_vectors({t1}, {1.0}).tensors == t1.tensors);
  for (const auto& [name, m] : merge_task_vectors({t1, scale(t1, -1.0)}, {1.0, 1.0}).tensors)
    for (double v : m.data()) CHECK(v == 0.0);
  const auto pi = random_assignment(g, rng);
  CHECK(apply_assignment(merge_task_vectors({t1, t2}, {0.5, 2.0}), g, pi).tensors ==
        merge_task_vectors({apply_assignment(t1, g, pi), apply_assignment(t2, g, pi)}, {0.5, 2.0})
            .tensors);
  CHECK_THROWS(merge_task_vectors({t1, t2}, {1.0}));
  CHECK_THROWS(merge_task_vectors({}, {}));
}

TEST_CASE("interpolation endpoints are exact") {
  const WeightSet a = random_weights(1), b = random_weights(2);
  CHECK(interpolate(a, b, 0.0).tensors == a.tensors);
  CHECK(interpolate(a, b, 1.0).tensors == b.tensors);
}
