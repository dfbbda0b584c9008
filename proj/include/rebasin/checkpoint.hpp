#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "rebasin/assignment.hpp"
#include "rebasin/model.hpp"

namespace rebasin {

// Inputs for the reference transformer: n sequences of seq_len tokens with
// input_dim features each, plus one class label per sequence.
struct EvalBatch {
  std::vector<Matrix> inputs;  // each seq_len x input_dim
  std::vector<std::size_t> targets;

  std::size_t size() const { return inputs.size(); }
  std::size_t seq_len() const { return inputs.empty() ? 0 : inputs.front().rows(); }
  std::size_t input_dim() const { return inputs.empty() ? 0 : inputs.front().cols(); }

  void validate(std::size_t output_dim) const;
};

// Container layout (one directory):
//   manifest.json  {"format", "version", "kind", "arch"?, "tensors": [
//                    {"name", "shape", "offset", "length"}, ...]}
//   tensors.bin    raw little-endian float32 blobs; offset/length in bytes
// kind is "weight_set", "task_vector" or "eval_batch".
struct RawTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

struct Container {
  std::string kind;
  bool has_arch = false;
  ArchSpec arch;
  std::vector<RawTensor> tensors;
};

// Values are rounded to float32 on write; a value that does not fit raises
// NonFiniteTensorError. Writes go to a sibling temp directory which then
// replaces `dir`.
void write_container(const Container& c, const std::filesystem::path& dir);
Container read_container(const std::filesystem::path& dir);

WeightSet read_checkpoint(const std::filesystem::path& dir);
void write_checkpoint(const WeightSet& ws, const std::filesystem::path& dir);

TaskVector read_task_vector(const std::filesystem::path& dir);
void write_task_vector(const TaskVector& tv, const std::filesystem::path& dir);

// Reads the manifest only and reports its kind.
std::string read_container_kind(const std::filesystem::path& dir);

EvalBatch read_eval_batch(const std::filesystem::path& dir);
void write_eval_batch(const EvalBatch& batch, const std::filesystem::path& dir);

// Text format, one record per line:  <variable_id> : <i0>,<i1>,...
// Attention variables with block structure are written as
//   <id>.inter : ...   and   <id>.intra.<h> : ...
// Blank lines and lines starting with '#' are ignored on read.
std::string format_permutation_assignment(const PermutationAssignment& a);
PermutationAssignment parse_permutation_assignment(const std::string& text);
PermutationAssignment read_permutation_assignment(const std::filesystem::path& path);
void write_permutation_assignment(const PermutationAssignment& a,
                                  const std::filesystem::path& path);

// One non-negative value per line.
std::vector<double> read_alpha_file(const std::filesystem::path& path);

// Write a text file via temp + rename.
void write_text_file_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace rebasin
