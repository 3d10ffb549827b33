#pragma once

#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "vidvisc/io_util.hpp"
#include "vidvisc/tensor.hpp"

namespace vidvisc {

// Binary layout (all integers little-endian):
//   "V2VC" | u8 version | 3 reserved zero bytes | u32 tensor count
//   per tensor: u32 name length | name | u8 dtype (0 = f32, 1 = f64) |
//               u32 rank | rank x u32 extents | raw values
//   u64 metadata length | metadata as JSON text
struct Checkpoint {
  using Entry = std::variant<Tensor<float>, Tensor<double>>;
  static constexpr uint8_t kVersion = 1;

  std::vector<std::pair<std::string, Entry>> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  void put(const std::string& name, Tensor<float> t) { tensors.emplace_back(name, std::move(t)); }
  void put(const std::string& name, Tensor<double> t) { tensors.emplace_back(name, std::move(t)); }
  bool contains(const std::string& name) const;
  const Tensor<float>& f32(const std::string& name) const;
  const Tensor<double>& f64(const std::string& name) const;
};

// Loaded checkpoint is incompatible with the model it is loaded into.
class CheckpointMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

bool bitwise_equal(const Checkpoint& a, const Checkpoint& b);

}  // namespace vidvisc
