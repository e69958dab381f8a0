#pragma once

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "caf/error.hpp"

namespace caf::detail {

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks to stay portable for large buffers.
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

/// Little-endian append-only encoder.
class ByteWriter {
 public:
  void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  template <typename U>
  void uint(U value) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }

  void f64(double value) { uint(std::bit_cast<std::uint64_t>(value)); }

  void str(std::string_view s) {
    uint(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }

  /// Appends CRC32 of everything written so far and returns the buffer.
  std::vector<std::uint8_t> finish_with_crc() && {
    uint(crc32_of(buf_.data(), buf_.size()));
    return std::move(buf_);
  }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian decoder; every short read is a FormatError.
class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size, std::string what)
      : data_(data), size_(size), what_(std::move(what)) {}

  /// Verifies and strips the trailing CRC32.
  void check_crc() {
    if (size_ < 4) fail("payload shorter than checksum");
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(data_[size_ - 4 + i]) << (8 * i);
    size_ -= 4;
    if (crc32_of(data_, size_) != stored) fail("checksum mismatch");
  }

  std::string raw(std::size_t n) {
    need(n);
    std::string out(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return out;
  }

  template <typename U>
  U uint() {
    need(sizeof(U));
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(data_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return value;
  }

  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }

  std::string str() { return raw(uint<std::uint32_t>()); }

  std::size_t remaining() const { return size_ - pos_; }

  [[noreturn]] void fail(const std::string& reason) const {
    throw FormatError(what_ + ": " + reason);
  }

 private:
  void need(std::size_t n) const {
    if (size_ - pos_ < n) fail("truncated payload");
  }

  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string what_;
};

}  // namespace caf::detail

#include <fstream>
#include <iterator>

namespace caf::detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path);
}

}  // namespace caf::detail
