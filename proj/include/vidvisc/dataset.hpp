#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vidvisc/tensor.hpp"

namespace vidvisc {

// D binary frames of H x W, frame-major then row-major, one byte per pixel.
struct MaskVideo {
  int64_t frames = 0, height = 0, width = 0;
  uint32_t fps = 30;
  std::string source_id;
  std::vector<uint8_t> pixels;

  static MaskVideo blank(int64_t frames, int64_t height, int64_t width, uint32_t fps = 30);

  int64_t frame_size() const { return height * width; }
  uint8_t at(int64_t t, int64_t r, int64_t c) const { return pixels[static_cast<size_t>((t * height + r) * width + c)]; }
  uint8_t& at(int64_t t, int64_t r, int64_t c) { return pixels[static_cast<size_t>((t * height + r) * width + c)]; }
  std::span<const uint8_t> frame(int64_t t) const {
    return {pixels.data() + t * frame_size(), static_cast<size_t>(frame_size())};
  }
  bool is_binary() const;
};

bool operator==(const MaskVideo& a, const MaskVideo& b);

// MVID layout: "MVID" | u8 version 1 | 3 zero bytes | u32 D, H, W, fps |
// 8 zero bytes | D*H*W payload bytes, each 0 or 1.
inline constexpr size_t kMvidHeaderSize = 32;
std::vector<uint8_t> encode_mvid(const MaskVideo& video);
MaskVideo decode_mvid(std::span<const uint8_t> bytes);
void write_mvid(const std::filesystem::path& path, const MaskVideo& video);
MaskVideo read_mvid(const std::filesystem::path& path);

struct RgbFrame {
  int64_t height = 0, width = 0;
  std::vector<uint8_t> rgb;  // H x W x 3
};

// Hue in degrees; a window with hue_lo > hue_hi wraps through 0.
struct HsvWindow {
  double hue_lo = 0, hue_hi = 360;
  double sat_min = 0, sat_max = 1;
  double val_min = 0, val_max = 1;
};

// Pixels inside the window, reduced to the largest 4-connected component; an
// all-zero mask when that component is smaller than `min_component`.
std::vector<uint8_t> threshold_segment(const RgbFrame& frame, const HsvWindow& window, int64_t min_component);

// Crops every frame to the union bounding box of lit pixels (padded by `pad`,
// clamped to the frame) and rescales to target_h x target_w by nearest neighbour.
MaskVideo resize_crop(const MaskVideo& video, int64_t target_h = 40, int64_t target_w = 100, int64_t pad = 2);

struct Clip {
  std::string video_id;
  int64_t start_frame = 0;
  int64_t depth = 0, height = 0, width = 0;
  std::vector<uint8_t> pixels;  // depth x height x width, binary

  int64_t size() const { return depth * height * width; }
};

Clip extract_clip(const MaskVideo& video, int64_t start, int64_t depth);

// D - d windows starting at 0, stride, 2*stride, ... below D - d.
std::vector<Clip> sliding_window(const MaskVideo& video, int64_t depth = 12, int64_t stride = 1);
// floor(D/d) consecutive windows from frame 0; trailing frames are dropped.
std::vector<Clip> nonoverlap_clips(const MaskVideo& video, int64_t depth = 12);

struct AugmentParams {
  int shift_h = 0, shift_w = 0;
  double rotation_deg = 0;
};

// Shifts drawn from {-2..3}, rotation from [-2, 3] degrees.
AugmentParams draw_augment(uint64_t seed);
// Rotation about the frame centre followed by translation, same for every
// frame; nearest-neighbour sampling, vacated pixels are 0.
Clip augment(const Clip& clip, const AugmentParams& params);
Clip augment(const Clip& clip, uint64_t seed);

// Seeded permutation of [0, count) cut into batches; the last may be short.
std::vector<std::vector<size_t>> batch_iter(size_t count, size_t batch_size, uint64_t shuffle_seed);

// Stacks clips into [N,1,d,h,w] with values 0 or 1.
Tensor<float> stack_clips(std::span<const Clip* const> clips);

enum class LabelKind { class_name, viscosity_cP };
std::string to_string(LabelKind kind);
LabelKind parse_label_kind(const std::string& s);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory unless absolute
  LabelKind kind = LabelKind::class_name;
  std::string label;
  std::string split;  // "train", "test" or empty

  double viscosity() const;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestEntry& e) const;
  LabelKind kind() const;
  // Sorted distinct class labels; a label's index is its class id.
  std::vector<std::string> class_names() const;
  std::vector<const ManifestEntry*> split(const std::string& name) const;
  // Rejects duplicate paths, mixed label kinds, bad viscosities, unknown splits.
  void validate() const;
};

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

// Marks the last `test_per_label` videos of each label as test, the rest train.
void assign_split(Manifest& manifest, int test_per_label);

}  // namespace vidvisc
