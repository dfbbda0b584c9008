#include "rebasin/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <unistd.h>

#include "json.hpp"
#include "rebasin/errors.hpp"

namespace rebasin {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kFormat = "rebasin-checkpoint";
constexpr int kVersion = 1;
constexpr const char* kManifest = "manifest.json";
constexpr const char* kBlob = "tensors.bin";

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
  return v;
}

fs::path temp_sibling(const fs::path& target) {
  static std::size_t counter = 0;
  fs::path p = target;
  p += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  return p;
}

void replace_with(const fs::path& tmp, const fs::path& target) {
  std::error_code ec;
  if (fs::exists(target) && fs::is_directory(target) && fs::is_directory(tmp)) {
    fs::remove_all(target, ec);
    if (ec) throw IoError("cannot replace " + target.string() + ": " + ec.message());
  }
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove_all(tmp);
    throw IoError("cannot move output into " + target.string() + ": " + ec.message());
  }
}

json arch_to_json(const ArchSpec& a) {
  json j;
  j["n_blocks"] = a.n_blocks;
  j["n_heads"] = a.n_heads;
  j["embed_dim"] = a.embed_dim;
  j["head_dim"] = a.head_dim();
  j["mlp_hidden"] = a.mlp_hidden;
  j["input_dim"] = a.input_dim;
  j["output_dim"] = a.output_dim;
  j["has_layernorm"] = a.has_layernorm;
  return j;
}

ArchSpec arch_from_json(const json& j) {
  ArchSpec a;
  try {
    a.n_blocks = j.at("n_blocks").get<std::size_t>();
    a.n_heads = j.at("n_heads").get<std::size_t>();
    a.embed_dim = j.at("embed_dim").get<std::size_t>();
    a.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
    a.input_dim = j.at("input_dim").get<std::size_t>();
    a.output_dim = j.at("output_dim").get<std::size_t>();
    a.has_layernorm = j.at("has_layernorm").get<bool>();
    const auto head_dim = j.at("head_dim").get<std::size_t>();
    a.validate();
    if (head_dim != a.head_dim()) {
      throw FormatError("manifest head_dim " + std::to_string(head_dim) +
                        " disagrees with embed_dim / n_heads");
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed arch in manifest: ") + e.what());
  } catch (const PreconditionError& e) {
    throw FormatError(std::string("invalid arch in manifest: ") + e.what());
  }
  return a;
}

json read_manifest(const fs::path& dir) {
  const fs::path mpath = dir / kManifest;
  std::ifstream in(mpath);
  if (!in) throw IoError("cannot open " + mpath.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  if (!m.is_object() || m.value("format", "") != kFormat) {
    throw FormatError(mpath.string() + " is not a " + kFormat + " manifest");
  }
  if (m.value("version", 0) != kVersion) {
    throw FormatError(mpath.string() + ": unsupported version");
  }
  return m;
}

template <class Tag>
ParameterSet<Tag> parameters_from_container(Container c, const std::string& kind) {
  if (c.kind != kind) {
    throw FormatError("expected a " + kind + " container, found " + c.kind);
  }
  if (!c.has_arch) throw FormatError(kind + " manifest has no arch");
  ParameterSet<Tag> p;
  p.arch = c.arch;
  const auto layout = canonical_layout(c.arch);
  std::map<std::string, RawTensor*> by_name;
  for (auto& t : c.tensors) by_name[t.name] = &t;
  for (const auto& spec : layout) {
    auto it = by_name.find(spec.name);
    if (it == by_name.end()) throw MissingTensorError(spec.name, "tensor missing from checkpoint");
    RawTensor& t = *it->second;
    if (t.shape != spec.shape) {
      throw TensorShapeError(spec.name, "manifest shape does not match architecture");
    }
    const std::size_t cols = spec.is_matrix() ? spec.shape[1] : 1;
    p.tensors.emplace(spec.name, Matrix(spec.shape[0], cols, std::move(t.values)));
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw UnexpectedTensorError(by_name.begin()->first, "tensor not part of the architecture");
  }
  return p;
}

template <class Tag>
Container container_from_parameters(const ParameterSet<Tag>& p, const std::string& kind) {
  p.arch.validate();
  p.validate();
  Container c;
  c.kind = kind;
  c.has_arch = true;
  c.arch = p.arch;
  for (const auto& spec : canonical_layout(p.arch)) {
    c.tensors.push_back({spec.name, spec.shape, p.at(spec.name).data()});
  }
  return c;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::size_t> parse_index_list(const std::string& text, const std::string& id) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw FormatError("variable '" + id + "': bad index '" + item + "'");
    }
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw FormatError("variable '" + id + "': index out of range '" + item + "'");
    }
  }
  if (out.empty()) throw FormatError("variable '" + id + "': empty index vector");
  return out;
}

Permutation checked_permutation(std::vector<std::size_t> idx, const std::string& id) {
  try {
    return Permutation(std::move(idx));
  } catch (const BijectionError& e) {
    throw BijectionError("variable '" + id + "': " + e.what());
  }
}

}  // namespace

void EvalBatch::validate(std::size_t output_dim) const {
  if (inputs.size() != targets.size()) {
    throw ShapeError("eval batch has " + std::to_string(inputs.size()) + " inputs and " +
                     std::to_string(targets.size()) + " targets");
  }
  if (inputs.empty()) throw PreconditionError("eval batch is empty");
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    if (inputs[n].rows() != seq_len() || inputs[n].cols() != input_dim()) {
      throw ShapeError("eval batch sequences have inconsistent shapes");
    }
    if (!inputs[n].all_finite()) throw NonFiniteError("eval batch input is not finite");
    if (targets[n] >= output_dim) {
      throw PreconditionError("eval batch label " + std::to_string(targets[n]) +
                              " out of range for " + std::to_string(output_dim) + " classes");
    }
  }
}

void write_container(const Container& c, const fs::path& dir) {
  json m;
  m["format"] = kFormat;
  m["version"] = kVersion;
  m["kind"] = c.kind;
  if (c.has_arch) m["arch"] = arch_to_json(c.arch);
  json list = json::array();

  std::string blob;
  for (const auto& t : c.tensors) {
    if (element_count(t.shape) != t.values.size()) {
      throw TensorShapeError(t.name, "value count does not match shape");
    }
    const std::size_t offset = blob.size();
    blob.resize(offset + 4 * t.values.size());
    char* dst = blob.data() + offset;
    for (double v : t.values) {
      const float f = static_cast<float>(v);
      if (!std::isfinite(f)) throw NonFiniteTensorError(t.name, "value not representable as float32");
      std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(f));
      std::memcpy(dst, &bits, 4);
      dst += 4;
    }
    json e;
    e["name"] = t.name;
    e["shape"] = t.shape;
    e["offset"] = offset;
    e["length"] = 4 * t.values.size();
    list.push_back(std::move(e));
  }
  m["tensors"] = std::move(list);

  const fs::path tmp = temp_sibling(dir);
  std::error_code ec;
  fs::create_directories(tmp, ec);
  if (ec) throw IoError("cannot create " + tmp.string() + ": " + ec.message());
  {
    std::ofstream out(tmp / kManifest, std::ios::binary);
    out << m.dump(2) << '\n';
    std::ofstream bin(tmp / kBlob, std::ios::binary);
    bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out || !bin) {
      fs::remove_all(tmp);
      throw IoError("failed writing container " + dir.string());
    }
  }
  replace_with(tmp, dir);
}

std::string read_container_kind(const fs::path& dir) {
  const json m = read_manifest(dir);
  if (!m.contains("kind") || !m["kind"].is_string()) {
    throw FormatError("manifest in " + dir.string() + " has no kind");
  }
  return m["kind"].get<std::string>();
}

Container read_container(const fs::path& dir) {
  const json m = read_manifest(dir);
  Container c;
  try {
    c.kind = m.at("kind").get<std::string>();
    if (m.contains("arch")) {
      c.has_arch = true;
      c.arch = arch_from_json(m.at("arch"));
    }
    const fs::path bpath = dir / kBlob;
    std::ifstream in(bpath, std::ios::binary);
    if (!in) throw IoError("cannot open " + bpath.string());
    const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::set<std::string> seen;
    for (const auto& e : m.at("tensors")) {
      RawTensor t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<std::vector<std::size_t>>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto length = e.at("length").get<std::size_t>();
      if (!seen.insert(t.name).second) throw FormatError("duplicate tensor " + t.name);
      if (t.shape.empty()) throw TensorShapeError(t.name, "empty shape");
      if (length % 4 != 0 || length / 4 != element_count(t.shape)) {
        throw TensorShapeError(t.name, "declared shape has " +
                                           std::to_string(element_count(t.shape)) +
                                           " values but blob holds " +
                                           std::to_string(length / 4));
      }
      if (offset > blob.size() || length > blob.size() - offset) {
        throw FormatError(t.name + ": blob range exceeds tensors.bin");
      }
      t.values.resize(length / 4);
      const char* src = blob.data() + offset;
      for (double& v : t.values) {
        std::uint32_t bits;
        std::memcpy(&bits, src, 4);
        src += 4;
        const float f = std::bit_cast<float>(to_little_endian(bits));
        if (!std::isfinite(f)) throw NonFiniteTensorError(t.name, "non-finite value");
        v = static_cast<double>(f);
      }
      c.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  return c;
}

WeightSet read_checkpoint(const fs::path& dir) {
  return parameters_from_container<WeightTag>(read_container(dir), "weight_set");
}

void write_checkpoint(const WeightSet& ws, const fs::path& dir) {
  write_container(container_from_parameters(ws, "weight_set"), dir);
}

TaskVector read_task_vector(const fs::path& dir) {
  return parameters_from_container<TaskVectorTag>(read_container(dir), "task_vector");
}

void write_task_vector(const TaskVector& tv, const fs::path& dir) {
  write_container(container_from_parameters(tv, "task_vector"), dir);
}

EvalBatch read_eval_batch(const fs::path& dir) {
  Container c = read_container(dir);
  if (c.kind != "eval_batch") throw FormatError("expected an eval_batch container, found " + c.kind);
  const RawTensor* inputs = nullptr;
  const RawTensor* targets = nullptr;
  for (const auto& t : c.tensors) {
    if (t.name == "inputs") inputs = &t;
    else if (t.name == "targets") targets = &t;
    else throw UnexpectedTensorError(t.name, "eval batch holds only inputs and targets");
  }
  if (!inputs) throw MissingTensorError("inputs", "tensor missing from eval batch");
  if (!targets) throw MissingTensorError("targets", "tensor missing from eval batch");
  if (inputs->shape.size() != 3) throw TensorShapeError("inputs", "expected shape (N, S, input_dim)");
  if (targets->shape.size() != 1 || targets->shape[0] != inputs->shape[0]) {
    throw TensorShapeError("targets", "expected shape (N)");
  }
  const std::size_t n = inputs->shape[0], s = inputs->shape[1], d = inputs->shape[2];
  EvalBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> seq(inputs->values.begin() + static_cast<std::ptrdiff_t>(i * s * d),
                            inputs->values.begin() + static_cast<std::ptrdiff_t>((i + 1) * s * d));
    b.inputs.emplace_back(s, d, std::move(seq));
    const double label = targets->values[i];
    if (label < 0 || label != std::floor(label) || label > 16777216.0) {
      throw FormatError("targets: value " + std::to_string(label) + " is not an exact class index");
    }
    b.targets.push_back(static_cast<std::size_t>(label));
  }
  return b;
}

void write_eval_batch(const EvalBatch& batch, const fs::path& dir) {
  if (batch.inputs.empty()) throw PreconditionError("cannot write an empty eval batch");
  Container c;
  c.kind = "eval_batch";
  RawTensor inputs{"inputs", {batch.size(), batch.seq_len(), batch.input_dim()}, {}};
  for (const auto& seq : batch.inputs) {
    if (seq.rows() != batch.seq_len() || seq.cols() != batch.input_dim()) {
      throw ShapeError("eval batch sequences have inconsistent shapes");
    }
    inputs.values.insert(inputs.values.end(), seq.data().begin(), seq.data().end());
  }
  RawTensor targets{"targets", {batch.size()}, {}};
  for (std::size_t t : batch.targets) {
    if (t > 16777216) throw PreconditionError("class index too large for float32 storage");
    targets.values.push_back(static_cast<double>(t));
  }
  c.tensors.push_back(std::move(inputs));
  c.tensors.push_back(std::move(targets));
  write_container(c, dir);
}

std::string format_permutation_assignment(const PermutationAssignment& a) {
  std::ostringstream os;
  for (const auto& [id, p] : a.entries()) {
    if (const BlockPermutation* bp = a.block(id)) {
      os << id << ".inter : " << to_string(bp->inter) << '\n';
      for (std::size_t h = 0; h < bp->intra.size(); ++h) {
        os << id << ".intra." << h << " : " << to_string(bp->intra[h]) << '\n';
      }
    } else {
      os << id << " : " << to_string(p) << '\n';
    }
  }
  return os.str();
}

PermutationAssignment parse_permutation_assignment(const std::string& text) {
  static const std::regex inter_re(R"(^(.+)\.inter$)");
  static const std::regex intra_re(R"(^(.+)\.intra\.(\d+)$)");

  struct Partial {
    std::optional<Permutation> inter;
    std::map<std::size_t, Permutation> intra;
  };
  std::map<std::string, Permutation> plain;
  std::map<std::string, Partial> structured;
  std::set<std::string> record_ids;

  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto colon = t.find(':');
    if (colon == std::string::npos) {
      throw FormatError("line " + std::to_string(lineno) + ": expected '<id> : <indices>'");
    }
    const std::string id = trim(t.substr(0, colon));
    if (id.empty()) throw FormatError("line " + std::to_string(lineno) + ": empty variable id");
    if (!record_ids.insert(id).second) throw FormatError("duplicate record for '" + id + "'");
    Permutation p = checked_permutation(parse_index_list(t.substr(colon + 1), id), id);

    std::smatch m;
    if (std::regex_match(id, m, inter_re)) {
      structured[m[1]].inter = std::move(p);
    } else if (std::regex_match(id, m, intra_re)) {
      structured[m[1]].intra.emplace(std::stoul(m[2]), std::move(p));
    } else {
      plain.emplace(id, std::move(p));
    }
  }

  PermutationAssignment a;
  for (auto& [id, p] : plain) {
    if (structured.count(id)) {
      throw FormatError("variable '" + id + "' has both flat and structured records");
    }
    a.set(id, std::move(p));
  }
  for (auto& [id, part] : structured) {
    if (!part.inter) throw FormatError("variable '" + id + "' has intra records but no inter");
    BlockPermutation bp;
    bp.inter = *part.inter;
    for (std::size_t h = 0; h < bp.inter.size(); ++h) {
      auto it = part.intra.find(h);
      if (it == part.intra.end()) {
        throw FormatError("variable '" + id + "' is missing intra record " + std::to_string(h));
      }
      bp.intra.push_back(it->second);
    }
    if (part.intra.size() != bp.inter.size()) {
      throw FormatError("variable '" + id + "' has intra records beyond its head count");
    }
    try {
      bp.validate();
    } catch (const ShapeError& e) {
      throw FormatError("variable '" + id + "': " + e.what());
    }
    a.set(id, std::move(bp));
  }
  return a;
}

PermutationAssignment read_permutation_assignment(const fs::path& path) {
  return parse_permutation_assignment(read_text_file(path));
}

void write_permutation_assignment(const PermutationAssignment& a, const fs::path& path) {
  write_text_file_atomic(path, format_permutation_assignment(a));
}

std::vector<double> read_alpha_file(const fs::path& path) {
  std::istringstream in(read_text_file(path));
  std::vector<double> out;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(t, &used);
    } catch (const std::exception&) {
      throw FormatError("alpha file: cannot parse '" + t + "'");
    }
    if (used != t.size() || !std::isfinite(v)) throw FormatError("alpha file: bad value '" + t + "'");
    if (v < 0.0) throw PreconditionError("alpha file: negative scaling " + t);
    out.push_back(v);
  }
  if (out.empty()) throw FormatError("alpha file " + path.string() + " has no values");
  return out;
}

void write_text_file_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary);
    out << text;
    if (!out) throw IoError("cannot write " + tmp.string());
  }
  replace_with(tmp, path);
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace rebasin
