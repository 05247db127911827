#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "sotu/checkpoint_io.hpp"
#include "sotu/errors.hpp"

namespace sotu::detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void header(ArtifactKind kind, std::uint64_t count) {
    bytes("SOTU", 4);
    u8(kFormatVersion);
    u8(static_cast<std::uint8_t>(kind));
    u64(count);
  }

  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}

  std::uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  /// Reads and checks magic, version and kind; returns the entry count.
  std::uint64_t header(ArtifactKind expected) {
    char magic[4];
    bytes(magic, 4);
    if (std::memcmp(magic, "SOTU", 4) != 0) throw Error(Errc::Format, "bad magic bytes");
    const auto version = u8();
    if (version != kFormatVersion) {
      throw Error(Errc::Format, "unsupported format version " + std::to_string(version));
    }
    const auto kind = u8();
    if (kind != static_cast<std::uint8_t>(expected)) {
      throw Error(Errc::Format, "unexpected artifact kind " + std::to_string(kind));
    }
    return u64();
  }
  /// Guards element counts read from the file before allocating.
  void need_elems(std::uint64_t count, std::size_t elem_size) const {
    if (count > (buf_.size() - pos_) / elem_size) throw Error(Errc::Format, "truncated file");
  }
  void finish() const {
    if (pos_ != buf_.size()) throw Error(Errc::Format, "trailing bytes after payload");
  }

 private:
  void need(std::uint64_t n) const {
    if (n > buf_.size() - pos_) throw Error(Errc::Format, "truncated file");
  }

  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

inline void write_shape(ByteWriter& w, const Shape& shape) {
  w.u64(shape.size());
  for (auto d : shape) w.u64(d);
}

inline Shape read_shape(ByteReader& r) {
  const auto rank = r.u64();
  if (rank == 0) throw Error(Errc::Format, "tensor rank 0");
  r.need_elems(rank, 8);
  Shape s(rank);
  for (auto& d : s) {
    d = r.u64();
    if (d == 0) throw Error(Errc::Format, "zero dimension");
  }
  return s;
}

}  // namespace sotu::detail
