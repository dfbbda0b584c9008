#include "rebasin/model.hpp"

#include <sstream>

#include "rebasin/errors.hpp"

namespace rebasin {

void ArchSpec::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw PreconditionError(std::string("arch: ") + name + " must be >= 1");
  };
  positive(n_blocks, "n_blocks");
  positive(n_heads, "n_heads");
  positive(embed_dim, "embed_dim");
  positive(mlp_hidden, "mlp_hidden");
  positive(input_dim, "input_dim");
  positive(output_dim, "output_dim");
  if (embed_dim % n_heads != 0) {
    throw PreconditionError("arch: embed_dim " + std::to_string(embed_dim) +
                            " is not divisible by n_heads " + std::to_string(n_heads));
  }
}

std::string describe(const ArchSpec& a) {
  std::ostringstream os;
  os << "L=" << a.n_blocks << " H=" << a.n_heads << " d_m=" << a.embed_dim
     << " d_h=" << a.mlp_hidden << " in=" << a.input_dim << " out=" << a.output_dim
     << " ln=" << (a.has_layernorm ? 1 : 0);
  return os.str();
}

void require_same_arch(const ArchSpec& a, const ArchSpec& b) {
  auto check = [](std::size_t x, std::size_t y, const char* field) {
    if (x != y) {
      throw ArchMismatchError(std::string("architecture mismatch in ") + field + ": " +
                              std::to_string(x) + " vs " + std::to_string(y));
    }
  };
  check(a.n_blocks, b.n_blocks, "n_blocks");
  check(a.n_heads, b.n_heads, "n_heads");
  check(a.embed_dim, b.embed_dim, "embed_dim");
  check(a.mlp_hidden, b.mlp_hidden, "mlp_hidden");
  check(a.input_dim, b.input_dim, "input_dim");
  check(a.output_dim, b.output_dim, "output_dim");
  check(a.has_layernorm, b.has_layernorm, "has_layernorm");
}

std::string block_prefix(std::size_t block) {
  return "block." + std::to_string(block) + ".";
}

std::vector<TensorSpec> canonical_layout(const ArchSpec& arch) {
  arch.validate();
  const std::size_t dm = arch.embed_dim;
  const std::size_t dh = arch.mlp_hidden;
  std::vector<TensorSpec> out;
  out.push_back({"embed.weight", {dm, arch.input_dim}});
  out.push_back({"embed.bias", {dm}});
  for (std::size_t i = 0; i < arch.n_blocks; ++i) {
    const std::string b = block_prefix(i);
    for (const char* proj : {"q", "k", "v", "out"}) {
      out.push_back({b + "attn." + proj + ".weight", {dm, dm}});
      out.push_back({b + "attn." + proj + ".bias", {dm}});
    }
    if (arch.has_layernorm) {
      out.push_back({b + "ln1.gain", {dm}});
      out.push_back({b + "ln1.bias", {dm}});
    }
    out.push_back({b + "mlp.fc1.weight", {dh, dm}});
    out.push_back({b + "mlp.fc1.bias", {dh}});
    out.push_back({b + "mlp.fc2.weight", {dm, dh}});
    out.push_back({b + "mlp.fc2.bias", {dm}});
    if (arch.has_layernorm) {
      out.push_back({b + "ln2.gain", {dm}});
      out.push_back({b + "ln2.bias", {dm}});
    }
  }
  out.push_back({"head.weight", {arch.output_dim, dm}});
  out.push_back({"head.bias", {arch.output_dim}});
  return out;
}

std::size_t owning_block(const ArchSpec& arch, const std::string& tensor) {
  if (tensor.starts_with("embed.")) return 0;
  if (tensor.starts_with("head.")) return arch.n_blocks - 1;
  if (tensor.starts_with("block.")) {
    const auto dot = tensor.find('.', 6);
    return std::stoul(tensor.substr(6, dot - 6));
  }
  throw UnexpectedTensorError(tensor, "not a canonical tensor name");
}

template <class Tag>
const Matrix& ParameterSet<Tag>::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw MissingTensorError(name, "tensor not present");
  return it->second;
}

template <class Tag>
Matrix& ParameterSet<Tag>::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw MissingTensorError(name, "tensor not present");
  return it->second;
}

template <class Tag>
ParameterSet<Tag> ParameterSet<Tag>::zeros(const ArchSpec& arch) {
  ParameterSet<Tag> p;
  p.arch = arch;
  for (const auto& spec : canonical_layout(arch)) {
    const std::size_t cols = spec.is_matrix() ? spec.shape[1] : 1;
    p.tensors.emplace(spec.name, Matrix(spec.shape[0], cols));
  }
  return p;
}

template <class Tag>
void ParameterSet<Tag>::validate() const {
  const auto layout = canonical_layout(arch);
  for (const auto& spec : layout) {
    auto it = tensors.find(spec.name);
    if (it == tensors.end()) throw MissingTensorError(spec.name, "tensor not present");
    const std::size_t cols = spec.is_matrix() ? spec.shape[1] : 1;
    if (it->second.rows() != spec.shape[0] || it->second.cols() != cols) {
      throw TensorShapeError(spec.name, "shape " + std::to_string(it->second.rows()) +
                                            "x" + std::to_string(it->second.cols()) +
                                            " does not match architecture");
    }
    if (!it->second.all_finite()) throw NonFiniteTensorError(spec.name, "non-finite value");
  }
  if (tensors.size() != layout.size()) {
    for (const auto& [name, _] : tensors) {
      bool known = false;
      for (const auto& spec : layout) known = known || spec.name == name;
      if (!known) throw UnexpectedTensorError(name, "not part of the architecture");
    }
  }
}

template struct ParameterSet<WeightTag>;
template struct ParameterSet<TaskVectorTag>;
template struct ParameterSet<GradientTag>;

namespace {

template <class Tag, class Fn>
ParameterSet<Tag> zip(const ParameterSet<Tag>& a, const ParameterSet<Tag>& b, Fn fn) {
  require_same_arch(a.arch, b.arch);
  if (a.tensors.size() != b.tensors.size()) {
    throw ArchMismatchError("parameter sets have different key sets");
  }
  ParameterSet<Tag> out;
  out.arch = a.arch;
  for (const auto& [name, ma] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end()) {
      throw ArchMismatchError("tensor " + name + " missing from second operand");
    }
    const Matrix& mb = it->second;
    if (ma.rows() != mb.rows() || ma.cols() != mb.cols()) {
      throw ArchMismatchError("tensor " + name + " has different shapes");
    }
    Matrix m(ma.rows(), ma.cols());
    for (std::size_t k = 0; k < m.size(); ++k) m.data()[k] = fn(ma.data()[k], mb.data()[k]);
    out.tensors.emplace(name, std::move(m));
  }
  return out;
}

}  // namespace

template <class Tag>
ParameterSet<Tag> add(const ParameterSet<Tag>& a, const ParameterSet<Tag>& b) {
  return zip(a, b, [](double x, double y) { return x + y; });
}

template <class Tag>
ParameterSet<Tag> subtract(const ParameterSet<Tag>& a, const ParameterSet<Tag>& b) {
  return zip(a, b, [](double x, double y) { return x - y; });
}

template <class Tag>
ParameterSet<Tag> scale(const ParameterSet<Tag>& a, double s) {
  ParameterSet<Tag> out = a;
  for (auto& [_, m] : out.tensors) m *= s;
  return out;
}

template <class Tag>
ParameterSet<Tag> interpolate(const ParameterSet<Tag>& a, const ParameterSet<Tag>& b,
                              double t) {
  if (t == 0.0) {
    require_same_arch(a.arch, b.arch);
    return a;
  }
  if (t == 1.0) {
    require_same_arch(a.arch, b.arch);
    return b;
  }
  return zip(a, b, [t](double x, double y) { return (1.0 - t) * x + t * y; });
}

#define REBASIN_INSTANTIATE(Tag)                                                    \
  template ParameterSet<Tag> add(const ParameterSet<Tag>&, const ParameterSet<Tag>&); \
  template ParameterSet<Tag> subtract(const ParameterSet<Tag>&,                     \
                                      const ParameterSet<Tag>&);                    \
  template ParameterSet<Tag> scale(const ParameterSet<Tag>&, double);               \
  template ParameterSet<Tag> interpolate(const ParameterSet<Tag>&,                  \
                                         const ParameterSet<Tag>&, double);

REBASIN_INSTANTIATE(WeightTag)
REBASIN_INSTANTIATE(TaskVectorTag)
REBASIN_INSTANTIATE(GradientTag)

#undef REBASIN_INSTANTIATE

}  // namespace rebasin
