#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vidvisc {

// Malformed binary input; `offset` is the byte position of the problem.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  size_t offset() const { return offset_; }

 private:
  size_t offset_;
};

class IoError : public std::runtime_error {
 public:
  IoError(const std::string& what, const std::filesystem::path& path)
      : std::runtime_error(what + ": " + path.string()), path_(path) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

std::vector<uint8_t> read_file(const std::filesystem::path& path);

// Writes to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

// Little-endian cursor helpers for the binary formats.
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u32(uint32_t v);
  void u64(uint64_t v);
  void bytes(std::span<const uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void str(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void zeros(size_t n) { buf_.insert(buf_.end(), n, 0); }
  std::vector<uint8_t>& buffer() { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> data) : data_(data) {}
  size_t offset() const { return pos_; }
  size_t remaining() const { return data_.size() - pos_; }
  void need(size_t n, const char* what) const;
  uint8_t u8(const char* what);
  uint32_t u32(const char* what);
  uint64_t u64(const char* what);
  std::span<const uint8_t> bytes(size_t n, const char* what);

 private:
  std::span<const uint8_t> data_;
  size_t pos_ = 0;
};

// 64-bit FNV-1a, used for config and dataset fingerprints.
uint64_t fnv1a64(std::span<const uint8_t> data, uint64_t seed = 0xcbf29ce484222325ULL);
uint64_t fnv1a64(const std::string& s);
std::string hex64(uint64_t v);

// SplitMix64 step; derives independent child seeds from a master seed.
uint64_t derive_seed(uint64_t master, uint64_t stream);

}  // namespace vidvisc
