#pragma once

// Little-endian primitive IO with byte-offset tracking for error messages.

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "stflow/errors.hpp"

namespace stflow::io {

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    le(bits);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    le(bits);
  }
  void raw(const std::string& s) { bytes(s.data(), s.size()); }
  /// u32 length followed by the bytes.
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  std::uint64_t offset() const { return offset_; }

 private:
  template <typename U>
  void le(U v) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(buf, sizeof(U));
  }
  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw FormatError("write failed at offset " + std::to_string(offset_));
    offset_ += n;
  }

  std::ostream& out_;
  std::uint64_t offset_ = 0;
};

class Reader {
 public:
  explicit Reader(std::istream& in, std::uint64_t start_offset = 0) : in_(in), offset_(start_offset) {}

  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1, "u8");
    return v;
  }
  std::uint32_t u32() { return le<std::uint32_t>("u32"); }
  std::uint64_t u64() { return le<std::uint64_t>("u64"); }
  float f32() {
    auto bits = le<std::uint32_t>("f32");
    float v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  double f64() {
    auto bits = le<std::uint64_t>("f64");
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string raw(std::size_t n, const char* what = "bytes") {
    std::string s(n, '\0');
    if (n > 0) bytes(s.data(), n, what);
    return s;
  }
  std::string str(std::uint32_t max_len = 1u << 24) {
    auto at = offset_;
    auto n = u32();
    if (n > max_len) fail(at, "string length " + std::to_string(n) + " exceeds limit");
    return raw(n, "string");
  }
  std::uint64_t offset() const { return offset_; }

  [[noreturn]] void fail(std::uint64_t at, const std::string& msg) const {
    throw FormatError(msg + " at offset " + std::to_string(at));
  }

 private:
  template <typename U>
  U le(const char* what) {
    unsigned char buf[sizeof(U)];
    bytes(buf, sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
  }
  void bytes(void* p, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      fail(offset_, std::string("truncated payload reading ") + what);
    }
    offset_ += n;
  }

  std::istream& in_;
  std::uint64_t offset_;
};

}  // namespace stflow::io
