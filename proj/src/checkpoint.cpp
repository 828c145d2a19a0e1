#include "ogfr/checkpoint.hpp"

#include <filesystem>
#include <type_traits>

#include "binary_io.hpp"

namespace ogfr {

namespace {
constexpr const char* kMagic = "OGFRCKP1";
constexpr std::uint8_t kF32 = 0, kF64 = 1;
}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

template <typename T>
void Checkpoint::add(const std::string& name, const Tensor<T>& t) {
  if (find(name) != nullptr) throw ContractError("checkpoint: duplicate tensor " + name);
  CheckpointTensor ct;
  ct.name = name;
  ct.dtype = std::is_same_v<T, float> ? kF32 : kF64;
  ct.shape = t.shape();
  ct.values.assign(t.data().begin(), t.data().end());
  tensors.push_back(std::move(ct));
}

template <typename T>
void Checkpoint::load(const std::string& name, Tensor<T>& dst) const {
  const CheckpointTensor* ct = find(name);
  if (ct == nullptr) throw CheckpointError("checkpoint: missing tensor '" + name + "'");
  if (ct->shape != dst.shape()) {
    throw CheckpointError("checkpoint: tensor '" + name + "' has shape " + shape_str(ct->shape) + ", model expects " +
                          shape_str(dst.shape()));
  }
  for (std::size_t i = 0; i < ct->values.size(); ++i) dst[i] = static_cast<T>(ct->values[i]);
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  binio::Writer w;
  w.magic(kMagic);
  w.put<std::uint32_t>(Checkpoint::kVersion);
  w.put<std::uint64_t>(ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    w.str(t.name);
    w.put<std::uint8_t>(t.dtype);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.put<std::uint64_t>(d);
    if (t.values.size() != shape_numel(t.shape)) throw ContractError("checkpoint: payload size mismatch for " + t.name);
    for (double v : t.values) {
      if (t.dtype == kF32) {
        w.put<float>(static_cast<float>(v));
      } else {
        w.put<double>(v);
      }
    }
  }
  const auto& tr = ckpt.trailer;
  w.put<std::int64_t>(tr.epoch);
  w.put<std::int64_t>(tr.step);
  w.put<double>(tr.baseline);
  w.put<std::uint64_t>(tr.rng_key);
  w.put<std::uint64_t>(tr.rng_counter);
  w.str(tr.config_hash);
  w.str(tr.config_json);
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  binio::Reader r(bytes, what);
  r.expect_magic(kMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint64_t>();
  Checkpoint ckpt;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.str();
    t.dtype = r.get<std::uint8_t>();
    if (t.dtype != kF32 && t.dtype != kF64) throw FormatError(what + ": unknown dtype for tensor " + t.name);
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    const std::size_t n = shape_numel(t.shape);
    const std::size_t width = t.dtype == kF32 ? 4 : 8;
    if (n > r.remaining() / width) throw FormatError(what + ": payload of " + t.name + " exceeds file");
    t.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) t.values[k] = t.dtype == kF32 ? r.get<float>() : r.get<double>();
    ckpt.tensors.push_back(std::move(t));
  }
  auto& tr = ckpt.trailer;
  tr.epoch = r.get<std::int64_t>();
  tr.step = r.get<std::int64_t>();
  tr.baseline = r.get<double>();
  tr.rng_key = r.get<std::uint64_t>();
  tr.rng_counter = r.get<std::uint64_t>();
  tr.config_hash = r.str();
  tr.config_json = r.str();
  if (!r.done()) throw FormatError(what + ": trailing bytes");
  return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string tmp = path + ".tmp";
  binio::write_file(tmp, encode_checkpoint(ckpt));
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(binio::read_file(path), path); }

template void Checkpoint::add<float>(const std::string&, const Tensor<float>&);
template void Checkpoint::add<double>(const std::string&, const Tensor<double>&);
template void Checkpoint::load<float>(const std::string&, Tensor<float>&) const;
template void Checkpoint::load<double>(const std::string&, Tensor<double>&) const;

}  // namespace ogfr
