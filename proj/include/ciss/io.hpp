#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "ciss/error.hpp"
#include "ciss/rng.hpp"

namespace ciss::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Append-only byte buffer for the little-endian container formats.
class Writer {
public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void str(const std::string& s) { bytes(s.data(), s.size()); }
  void f64s(std::span<const double> v) { bytes(v.data(), v.size_bytes()); }
  void i32s(std::span<const int> v) {
    for (int x : v) {
      auto y = static_cast<std::int32_t>(x);
      bytes(&y, sizeof y);
    }
  }

  const std::string& buffer() const noexcept { return buf_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError(path.string(), "cannot open for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw LoadError(path.string(), "write failed");
  }

private:
  std::string buf_;
};

/// Bounds-checked reader; every failure is reported against `path`.
class Reader {
public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  static Reader open(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError(path.string(), "cannot open for reading");
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Reader(std::move(data), path.string());
  }

  void bytes(void* p, std::size_t n) {
    if (n > data_.size() - pos_) fail("truncated file");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str(std::size_t n) {
    if (n > data_.size() - pos_) fail("truncated file");
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> f64s(std::size_t n) {
    std::vector<double> v(n);
    bytes(v.data(), n * sizeof(double));
    return v;
  }
  std::vector<int> i32s(std::size_t n) {
    std::vector<int> v(n);
    for (auto& x : v) {
      std::int32_t y;
      bytes(&y, sizeof y);
      x = y;
    }
    return v;
  }
  void expect_magic(std::string_view magic) {
    if (str(magic.size()) != magic) fail("bad magic, not a " + std::string(magic) + " file");
  }

  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  std::string_view rest() const noexcept { return std::string_view(data_).substr(pos_); }
  const std::string& path() const noexcept { return path_; }
  [[noreturn]] void fail(const std::string& what) const { throw LoadError(path_, what); }

private:
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::uint64_t checksum(std::string_view payload) { return fnv1a(payload); }

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(path.string(), "cannot open for reading");
  return {(std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw LoadError(path.string(), "cannot open for writing");
  out << text;
}

}  // namespace ciss::io
