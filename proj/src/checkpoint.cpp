#include "vidvisc/checkpoint.hpp"

#include <cstring>

namespace vidvisc {

namespace {

template <typename T>
void write_tensor(ByteWriter& w, const Tensor<T>& t) {
  w.u32(static_cast<uint32_t>(t.rank()));
  for (auto e : t.shape()) w.u32(static_cast<uint32_t>(e));
  // Host is little-endian (x86-64/aarch64); values are written as stored.
  w.bytes(std::span(reinterpret_cast<const uint8_t*>(t.raw()), t.size() * sizeof(T)));
}

template <typename T>
Tensor<T> read_tensor(ByteReader& r) {
  const uint32_t rank = r.u32("tensor rank");
  if (rank > 8) throw FormatError("tensor rank " + std::to_string(rank) + " exceeds 8", r.offset() - 4);
  Shape shape;
  for (uint32_t i = 0; i < rank; ++i) {
    const uint32_t e = r.u32("tensor extent");
    if (e == 0) throw FormatError("zero tensor extent", r.offset() - 4);
    shape.push_back(e);
  }
  const auto count = static_cast<size_t>(shape_numel(shape));
  auto raw = r.bytes(count * sizeof(T), "tensor values");
  std::vector<T> data(count);
  std::memcpy(data.data(), raw.data(), raw.size());
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

const Tensor<float>& Checkpoint::f32(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) {
      if (auto p = std::get_if<Tensor<float>>(&t)) return *p;
      throw CheckpointMismatch("checkpoint tensor '" + name + "' is not float32");
    }
  }
  throw CheckpointMismatch("checkpoint has no tensor '" + name + "'");
}

const Tensor<double>& Checkpoint::f64(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) {
      if (auto p = std::get_if<Tensor<double>>(&t)) return *p;
      throw CheckpointMismatch("checkpoint tensor '" + name + "' is not float64");
    }
  }
  throw CheckpointMismatch("checkpoint has no tensor '" + name + "'");
}

std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.str("V2VC");
  w.u8(Checkpoint::kVersion);
  w.zeros(3);
  w.u32(static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, entry] : ckpt.tensors) {
    w.u32(static_cast<uint32_t>(name.size()));
    w.str(name);
    if (auto f = std::get_if<Tensor<float>>(&entry)) {
      w.u8(0);
      write_tensor(w, *f);
    } else {
      w.u8(1);
      write_tensor(w, std::get<Tensor<double>>(entry));
    }
  }
  const std::string meta = ckpt.metadata.dump();
  w.u64(meta.size());
  w.str(meta);
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), "V2VC", 4) != 0) throw FormatError("bad checkpoint magic, expected \"V2VC\"", 0);
  const uint8_t version = r.u8("version");
  if (version != Checkpoint::kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(Checkpoint::kVersion) + ")",
                      4);
  }
  auto reserved = r.bytes(3, "reserved");
  for (size_t i = 0; i < 3; ++i) {
    if (reserved[i] != 0) throw FormatError("reserved header byte is not zero", 5 + i);
  }
  Checkpoint ckpt;
  const uint32_t count = r.u32("tensor count");
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t len = r.u32("name length");
    auto name = r.bytes(len, "tensor name");
    std::string n(name.begin(), name.end());
    const size_t dtype_at = r.offset();
    const uint8_t dtype = r.u8("dtype");
    if (dtype == 0) {
      ckpt.put(n, read_tensor<float>(r));
    } else if (dtype == 1) {
      ckpt.put(n, read_tensor<double>(r));
    } else {
      throw FormatError("unknown dtype " + std::to_string(dtype) + " for tensor '" + n + "'", dtype_at);
    }
  }
  const uint64_t meta_len = r.u64("metadata length");
  const size_t meta_at = r.offset();
  auto meta = r.bytes(static_cast<size_t>(meta_len), "metadata");
  try {
    ckpt.metadata = nlohmann::json::parse(meta.begin(), meta.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("metadata is not valid JSON: ") + e.what(), meta_at + e.byte);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after metadata", r.offset());
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

bool bitwise_equal(const Checkpoint& a, const Checkpoint& b) { return encode_checkpoint(a) == encode_checkpoint(b); }

}  // namespace vidvisc
