#include "rebasin/transport.hpp"

#include <cmath>

#include "rebasin/errors.hpp"

namespace rebasin {

ScalingSpec ScalingSpec::scalar(double alpha) {
  if (!std::isfinite(alpha) || alpha < 0.0) {
    throw PreconditionError("scaling alpha must be finite and non-negative");
  }
  ScalingSpec s;
  s.values_ = {alpha};
  s.scalar_ = true;
  return s;
}

ScalingSpec ScalingSpec::per_block(std::vector<double> alphas) {
  if (alphas.empty()) throw PreconditionError("per-block scaling needs at least one value");
  for (double a : alphas) {
    if (!std::isfinite(a) || a < 0.0) {
      throw PreconditionError("per-block scaling values must be finite and non-negative");
    }
  }
  ScalingSpec s;
  s.values_ = std::move(alphas);
  s.scalar_ = false;
  return s;
}

double ScalingSpec::for_tensor(const ArchSpec& arch, const std::string& tensor) const {
  if (scalar_) return values_.front();
  if (values_.size() != arch.n_blocks) {
    throw PreconditionError("per-block scaling has " + std::to_string(values_.size()) +
                            " values for " + std::to_string(arch.n_blocks) + " blocks");
  }
  return values_[owning_block(arch, tensor)];
}

TaskVector compute_task_vector(const WeightSet& finetuned, const WeightSet& base) {
  require_same_arch(finetuned.arch, base.arch);
  return retag<TaskVectorTag>(subtract(finetuned, base));
}

WeightSet transport(const WeightSet& base, const TaskVector& tau, const PermutationAssignment& pi,
                    const CouplingGraph& g, const ScalingSpec& scaling) {
  require_same_arch(base.arch, tau.arch);
  require_same_arch(base.arch, g.arch);
  if (!scaling.is_scalar()) scaling.for_tensor(base.arch, "embed.weight");
  const TaskVector moved = apply_assignment(tau, g, pi);
  WeightSet out = base;
  for (auto& [name, m] : out.tensors) {
    const double alpha = scaling.for_tensor(base.arch, name);
    if (alpha == 0.0) continue;
    const Matrix& delta = moved.at(name);
    if (delta.rows() != m.rows() || delta.cols() != m.cols()) {
      throw ArchMismatchError("task vector tensor " + name + " has a different shape");
    }
    for (std::size_t k = 0; k < m.size(); ++k) m.data()[k] += alpha * delta.data()[k];
  }
  return out;
}

TaskVector merge_task_vectors(const std::vector<TaskVector>& vectors,
                              const std::vector<double>& weights) {
  if (vectors.empty()) throw PreconditionError("nothing to merge");
  if (vectors.size() != weights.size()) {
    throw PreconditionError("merge needs one weight per task vector");
  }
  TaskVector out = scale(vectors.front(), weights.front());
  for (std::size_t i = 1; i < vectors.size(); ++i) {
    out = add(out, scale(vectors[i], weights[i]));
  }
  return out;
}

}  // namespace rebasin
