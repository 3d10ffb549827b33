#include "vidvisc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "vidvisc/io_util.hpp"

namespace vidvisc {

MaskVideo MaskVideo::blank(int64_t frames, int64_t height, int64_t width, uint32_t fps) {
  MaskVideo v;
  v.frames = frames;
  v.height = height;
  v.width = width;
  v.fps = fps;
  v.pixels.assign(static_cast<size_t>(frames * height * width), 0);
  return v;
}

bool MaskVideo::is_binary() const {
  return std::all_of(pixels.begin(), pixels.end(), [](uint8_t p) { return p <= 1; });
}

bool operator==(const MaskVideo& a, const MaskVideo& b) {
  return a.frames == b.frames && a.height == b.height && a.width == b.width && a.fps == b.fps &&
         a.pixels == b.pixels;
}

std::vector<uint8_t> encode_mvid(const MaskVideo& video) {
  if (video.frames < 1 || video.height < 1 || video.width < 1) {
    throw std::invalid_argument("mvid: video extents must be positive");
  }
  if (static_cast<int64_t>(video.pixels.size()) != video.frames * video.frame_size()) {
    throw std::invalid_argument("mvid: pixel buffer does not match extents");
  }
  if (!video.is_binary()) throw std::invalid_argument("mvid: frames must be binary to be written");
  ByteWriter w;
  w.str("MVID");
  w.u8(1);
  w.zeros(3);
  w.u32(static_cast<uint32_t>(video.frames));
  w.u32(static_cast<uint32_t>(video.height));
  w.u32(static_cast<uint32_t>(video.width));
  w.u32(video.fps);
  w.zeros(8);
  w.bytes(video.pixels);
  return std::move(w.buffer());
}

MaskVideo decode_mvid(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), "MVID")) throw FormatError("mvid: bad magic", 0);
  if (const uint8_t version = r.u8("version"); version != 1) {
    throw FormatError("mvid: unsupported version " + std::to_string(version), 4);
  }
  for (uint8_t b : r.bytes(3, "reserved")) {
    if (b != 0) throw FormatError("mvid: reserved header bytes must be zero", 5);
  }
  MaskVideo v;
  v.frames = r.u32("frame count");
  v.height = r.u32("height");
  v.width = r.u32("width");
  v.fps = r.u32("fps");
  for (uint8_t b : r.bytes(8, "reserved")) {
    if (b != 0) throw FormatError("mvid: reserved header bytes must be zero", 24);
  }
  if (v.frames < 1 || v.height < 1 || v.width < 1) throw FormatError("mvid: zero extent in header", 8);
  const auto n = static_cast<size_t>(v.frames * v.height * v.width);
  auto payload = r.bytes(n, "payload");
  for (size_t i = 0; i < n; ++i) {
    if (payload[i] > 1) {
      throw FormatError("mvid: non-binary pixel value " + std::to_string(payload[i]), kMvidHeaderSize + i);
    }
  }
  if (r.remaining() != 0) throw FormatError("mvid: trailing bytes after payload", r.offset());
  v.pixels.assign(payload.begin(), payload.end());
  return v;
}

void write_mvid(const std::filesystem::path& path, const MaskVideo& video) {
  write_file_atomic(path, encode_mvid(video));
}

MaskVideo read_mvid(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  try {
    MaskVideo v = decode_mvid(bytes);
    v.source_id = path.stem().string();
    return v;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

namespace {

void rgb_to_hsv(uint8_t r8, uint8_t g8, uint8_t b8, double& h, double& s, double& v) {
  const double r = r8 / 255.0, g = g8 / 255.0, b = b8 / 255.0;
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), delta = mx - mn;
  v = mx;
  s = mx > 0 ? delta / mx : 0;
  if (delta == 0) {
    h = 0;
  } else if (mx == r) {
    h = 60 * std::fmod((g - b) / delta + 6, 6.0);
  } else if (mx == g) {
    h = 60 * ((b - r) / delta + 2);
  } else {
    h = 60 * ((r - g) / delta + 4);
  }
}

bool hue_in(double h, double lo, double hi) { return lo <= hi ? (h >= lo && h <= hi) : (h >= lo || h <= hi); }

}  // namespace

std::vector<uint8_t> threshold_segment(const RgbFrame& frame, const HsvWindow& window, int64_t min_component) {
  const int64_t n = frame.height * frame.width;
  if (static_cast<int64_t>(frame.rgb.size()) != n * 3) throw std::invalid_argument("threshold_segment: rgb size");
  std::vector<uint8_t> inside(static_cast<size_t>(n), 0);
  for (int64_t i = 0; i < n; ++i) {
    double h, s, v;
    rgb_to_hsv(frame.rgb[3 * i], frame.rgb[3 * i + 1], frame.rgb[3 * i + 2], h, s, v);
    inside[i] = hue_in(h, window.hue_lo, window.hue_hi) && s >= window.sat_min && s <= window.sat_max &&
                v >= window.val_min && v <= window.val_max;
  }

  // Label 4-connected components by flood fill; keep the first largest.
  std::vector<int32_t> label(static_cast<size_t>(n), -1);
  std::vector<int64_t> stack;
  int32_t best = -1, next = 0;
  int64_t best_area = 0;
  for (int64_t seed = 0; seed < n; ++seed) {
    if (!inside[seed] || label[seed] >= 0) continue;
    int64_t area = 0;
    stack.push_back(seed);
    label[seed] = next;
    while (!stack.empty()) {
      const int64_t p = stack.back();
      stack.pop_back();
      ++area;
      const int64_t r = p / frame.width, c = p % frame.width;
      const int64_t nb[4] = {r > 0 ? p - frame.width : -1, r + 1 < frame.height ? p + frame.width : -1,
                             c > 0 ? p - 1 : -1, c + 1 < frame.width ? p + 1 : -1};
      for (int64_t q : nb) {
        if (q >= 0 && inside[q] && label[q] < 0) {
          label[q] = next;
          stack.push_back(q);
        }
      }
    }
    if (area > best_area) {
      best_area = area;
      best = next;
    }
    ++next;
  }
  std::vector<uint8_t> mask(static_cast<size_t>(n), 0);
  if (best >= 0 && best_area >= min_component) {
    for (int64_t i = 0; i < n; ++i) mask[i] = label[i] == best;
  }
  return mask;
}

MaskVideo resize_crop(const MaskVideo& video, int64_t target_h, int64_t target_w, int64_t pad) {
  if (target_h < 1 || target_w < 1 || pad < 0) throw std::invalid_argument("resize_crop: bad target or pad");
  int64_t r0 = video.height, r1 = -1, c0 = video.width, c1 = -1;
  for (int64_t t = 0; t < video.frames; ++t) {
    for (int64_t r = 0; r < video.height; ++r) {
      for (int64_t c = 0; c < video.width; ++c) {
        if (video.at(t, r, c)) {
          r0 = std::min(r0, r);
          r1 = std::max(r1, r);
          c0 = std::min(c0, c);
          c1 = std::max(c1, c);
        }
      }
    }
  }
  if (r1 < 0) throw std::invalid_argument("resize_crop: video '" + video.source_id + "' has no lit pixels");
  r0 = std::max<int64_t>(0, r0 - pad);
  c0 = std::max<int64_t>(0, c0 - pad);
  r1 = std::min(video.height - 1, r1 + pad);
  c1 = std::min(video.width - 1, c1 + pad);
  const int64_t bh = r1 - r0 + 1, bw = c1 - c0 + 1;

  std::vector<int64_t> rows(static_cast<size_t>(target_h)), cols(static_cast<size_t>(target_w));
  for (int64_t r = 0; r < target_h; ++r) rows[r] = r0 + std::min(bh - 1, (2 * r + 1) * bh / (2 * target_h));
  for (int64_t c = 0; c < target_w; ++c) cols[c] = c0 + std::min(bw - 1, (2 * c + 1) * bw / (2 * target_w));

  MaskVideo out = MaskVideo::blank(video.frames, target_h, target_w, video.fps);
  out.source_id = video.source_id;
  for (int64_t t = 0; t < video.frames; ++t) {
    for (int64_t r = 0; r < target_h; ++r) {
      for (int64_t c = 0; c < target_w; ++c) out.at(t, r, c) = video.at(t, rows[r], cols[c]) ? 1 : 0;
    }
  }
  return out;
}

Clip extract_clip(const MaskVideo& video, int64_t start, int64_t depth) {
  if (start < 0 || depth < 1 || start + depth > video.frames) {
    throw std::out_of_range("clip [" + std::to_string(start) + "," + std::to_string(start + depth) +
                            ") outside video of " + std::to_string(video.frames) + " frames");
  }
  Clip c;
  c.video_id = video.source_id;
  c.start_frame = start;
  c.depth = depth;
  c.height = video.height;
  c.width = video.width;
  auto first = video.pixels.begin() + start * video.frame_size();
  c.pixels.assign(first, first + depth * video.frame_size());
  return c;
}

std::vector<Clip> sliding_window(const MaskVideo& video, int64_t depth, int64_t stride) {
  if (depth < 1 || stride < 1) throw std::invalid_argument("sliding_window: depth and stride must be positive");
  if (video.frames <= depth) {
    throw std::invalid_argument("sliding_window: video '" + video.source_id + "' has " +
                                std::to_string(video.frames) + " frames, needs more than " + std::to_string(depth));
  }
  std::vector<Clip> clips;
  for (int64_t s = 0; s < video.frames - depth; s += stride) clips.push_back(extract_clip(video, s, depth));
  return clips;
}

std::vector<Clip> nonoverlap_clips(const MaskVideo& video, int64_t depth) {
  if (depth < 1) throw std::invalid_argument("nonoverlap_clips: depth must be positive");
  if (video.frames < depth) {
    throw std::invalid_argument("nonoverlap_clips: video '" + video.source_id + "' has " +
                                std::to_string(video.frames) + " frames, needs at least " + std::to_string(depth));
  }
  std::vector<Clip> clips;
  for (int64_t k = 0; k < video.frames / depth; ++k) clips.push_back(extract_clip(video, k * depth, depth));
  return clips;
}

AugmentParams draw_augment(uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> shift(-2, 3);
  std::uniform_real_distribution<double> angle(-2.0, 3.0);
  AugmentParams p;
  p.shift_h = shift(rng);
  p.shift_w = shift(rng);
  p.rotation_deg = angle(rng);
  return p;
}

Clip augment(const Clip& clip, const AugmentParams& params) {
  Clip out = clip;
  std::fill(out.pixels.begin(), out.pixels.end(), 0);
  const int64_t h = clip.height, w = clip.width;
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const double th = params.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  // Inverse map: undo the translation, then rotate by -theta about the centre.
  std::vector<int64_t> src(static_cast<size_t>(h * w), -1);
  for (int64_t r = 0; r < h; ++r) {
    for (int64_t c = 0; c < w; ++c) {
      const double y = r - params.shift_h - cy, x = c - params.shift_w - cx;
      const auto sr = static_cast<int64_t>(std::lround(cs * y + sn * x + cy));
      const auto sc = static_cast<int64_t>(std::lround(-sn * y + cs * x + cx));
      if (sr >= 0 && sr < h && sc >= 0 && sc < w) src[r * w + c] = sr * w + sc;
    }
  }
  for (int64_t t = 0; t < clip.depth; ++t) {
    const uint8_t* in = clip.pixels.data() + t * h * w;
    uint8_t* o = out.pixels.data() + t * h * w;
    for (int64_t i = 0; i < h * w; ++i) {
      if (src[i] >= 0) o[i] = in[src[i]];
    }
  }
  return out;
}

Clip augment(const Clip& clip, uint64_t seed) { return augment(clip, draw_augment(seed)); }

std::vector<std::vector<size_t>> batch_iter(size_t count, size_t batch_size, uint64_t shuffle_seed) {
  if (count == 0) throw std::invalid_argument("batch_iter: no clips");
  if (batch_size == 0) throw std::invalid_argument("batch_iter: batch size must be positive");
  std::vector<size_t> order(count);
  for (size_t i = 0; i < count; ++i) order[i] = i;
  std::mt19937_64 rng(shuffle_seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<size_t>> batches;
  for (size_t s = 0; s < count; s += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(count, s + batch_size)));
  }
  return batches;
}

Tensor<float> stack_clips(std::span<const Clip* const> clips) {
  if (clips.empty()) throw std::invalid_argument("stack_clips: empty batch");
  const Clip& first = *clips.front();
  Tensor<float> t({static_cast<int64_t>(clips.size()), 1, first.depth, first.height, first.width});
  float* dst = t.raw();
  for (const Clip* c : clips) {
    if (c->depth != first.depth || c->height != first.height || c->width != first.width) {
      throw ShapeError("stack_clips: clips of different shapes in one batch");
    }
    for (uint8_t p : c->pixels) *dst++ = p;
  }
  return t;
}

std::string to_string(LabelKind kind) { return kind == LabelKind::class_name ? "class" : "viscosity_cP"; }

LabelKind parse_label_kind(const std::string& s) {
  if (s == "class") return LabelKind::class_name;
  if (s == "viscosity_cP") return LabelKind::viscosity_cP;
  throw std::invalid_argument("unknown label kind '" + s + "' (expected class or viscosity_cP)");
}

double ManifestEntry::viscosity() const {
  size_t used = 0;
  double v = 0;
  try {
    v = std::stod(label, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != label.size() || !(v > 0) || !std::isfinite(v)) {
    throw std::invalid_argument("manifest: viscosity '" + label + "' for " + path + " is not a positive number");
  }
  return v;
}

std::filesystem::path Manifest::resolve(const ManifestEntry& e) const {
  std::filesystem::path p(e.path);
  return p.is_absolute() ? p : base_dir / p;
}

LabelKind Manifest::kind() const {
  if (entries.empty()) throw std::invalid_argument("manifest is empty");
  return entries.front().kind;
}

std::vector<std::string> Manifest::class_names() const {
  std::set<std::string> names;
  for (const auto& e : entries) names.insert(e.label);
  return {names.begin(), names.end()};
}

std::vector<const ManifestEntry*> Manifest::split(const std::string& name) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == name) out.push_back(&e);
  }
  return out;
}

void Manifest::validate() const {
  if (entries.empty()) throw std::invalid_argument("manifest is empty");
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (!seen.insert(e.path).second) throw std::invalid_argument("manifest: duplicate path " + e.path);
    if (e.kind != entries.front().kind) throw std::invalid_argument("manifest: mixed label kinds");
    if (e.kind == LabelKind::viscosity_cP) e.viscosity();
    if (!e.split.empty() && e.split != "train" && e.split != "test") {
      throw std::invalid_argument("manifest: unknown split '" + e.split + "' for " + e.path);
    }
  }
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest", path);
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string col; std::getline(ss, col, '\t');) cols.push_back(col);
    if (cols.size() < 3 || cols.size() > 4) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected 3 or 4 tab-separated fields");
    }
    ManifestEntry e;
    e.path = cols[0];
    e.kind = parse_label_kind(cols[1]);
    e.label = cols[2];
    if (cols.size() == 4) e.split = cols[3];
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::string text;
  for (const auto& e : manifest.entries) {
    text += e.path + '\t' + to_string(e.kind) + '\t' + e.label;
    if (!e.split.empty()) text += '\t' + e.split;
    text += '\n';
  }
  write_text_atomic(path, text);
}

void assign_split(Manifest& manifest, int test_per_label) {
  if (test_per_label < 0) throw std::invalid_argument("assign_split: negative test count");
  std::map<std::string, int> total, seen;
  for (const auto& e : manifest.entries) ++total[e.label];
  for (auto& e : manifest.entries) {
    const int k = seen[e.label]++;
    e.split = k >= total[e.label] - test_per_label ? "test" : "train";
  }
}

}  // namespace vidvisc
