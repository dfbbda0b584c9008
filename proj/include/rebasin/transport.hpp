#pragma once

#include <vector>

#include "rebasin/assignment.hpp"
#include "rebasin/model.hpp"
#include "rebasin/perm_graph.hpp"

namespace rebasin {

// Either one scalar for every tensor or one value per block. In per-block
// form embed.* uses the first value and head.* the last.
class ScalingSpec {
 public:
  // Throws PreconditionError on negative or non-finite values.
  static ScalingSpec scalar(double alpha);
  static ScalingSpec per_block(std::vector<double> alphas);

  bool is_scalar() const { return values_.size() == 1 && scalar_; }
  const std::vector<double>& values() const { return values_; }

  // Scaling for one canonical tensor; checks the block count in per-block form.
  double for_tensor(const ArchSpec& arch, const std::string& tensor) const;

 private:
  std::vector<double> values_;
  bool scalar_ = true;
};

TaskVector compute_task_vector(const WeightSet& finetuned, const WeightSet& base);

// base + alpha * pi(tau). Tensors whose scaling is exactly zero are copied
// from base untouched.
WeightSet transport(const WeightSet& base, const TaskVector& tau, const PermutationAssignment& pi,
                    const CouplingGraph& g, const ScalingSpec& scaling);

TaskVector merge_task_vectors(const std::vector<TaskVector>& vectors,
                              const std::vector<double>& weights);

}  // namespace rebasin
