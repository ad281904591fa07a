// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary containers shared by the trace, event-grid and
// validator file formats. A file is a 4-byte magic, a u32 version, and a
// sequence of sections; each section is a u64 payload length, the payload,
// and a u32 CRC32 of the payload.
#pragma once

#include "flowsig/common.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace flowsig::io {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large sections.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  template <typename T>
  void put_array(std::span<const T> values) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    buf_.insert(buf_.end(), p, p + values.size_bytes());
  }
  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string section)
      : bytes_(bytes), section_(std::move(section)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  template <typename T>
  void get_array(std::span<T> out) {
    need(out.size_bytes());
    std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw FormatError("section " + section_ + ": truncated payload");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string section_;
};

// Accumulates a whole container in memory, then writes it in one go.
class ContainerWriter {
public:
  ContainerWriter(std::string_view magic, std::uint32_t version) {
    out_.put_array(std::span<const char>(magic.data(), magic.size()));
    out_.put(version);
  }
  void section(std::span<const std::uint8_t> payload) {
    out_.put<std::uint64_t>(payload.size());
    out_.put_array(payload);
    out_.put(crc32_of(payload));
  }
  template <typename T>
  void array_section(std::span<const T> values) {
    section(std::span<const std::uint8_t>(
        reinterpret_cast<const std::uint8_t*>(values.data()), values.size_bytes()));
  }
  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open " + path + " for writing");
    const auto& b = out_.bytes();
    f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    if (!f) throw FormatError("write failed: " + path);
  }

private:
  ByteWriter out_;
};

class ContainerReader {
public:
  ContainerReader(const std::string& path, std::string_view magic,
                  std::uint32_t max_version) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open " + path);
    data_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    if (data_.size() < magic.size() + 4 ||
        std::memcmp(data_.data(), magic.data(), magic.size()) != 0)
      throw FormatError("section MAGIC: expected \"" + std::string(magic) + "\"");
    std::memcpy(&version_, data_.data() + magic.size(), 4);
    if (version_ == 0 || version_ > max_version)
      throw FormatError("section VERSION: unsupported version " + std::to_string(version_));
    pos_ = magic.size() + 4;
  }

  std::uint32_t version() const { return version_; }
  bool at_end() const { return pos_ == data_.size(); }

  // Returns the payload of the next section after validating length and CRC.
  std::span<const std::uint8_t> section(const std::string& name) {
    if (pos_ + 8 > data_.size()) throw FormatError("section " + name + ": missing");
    std::uint64_t len;
    std::memcpy(&len, data_.data() + pos_, 8);
    if (len > data_.size() - pos_ - 8 || data_.size() - pos_ - 8 - len < 4)
      throw FormatError("section " + name + ": truncated");
    std::span<const std::uint8_t> payload(data_.data() + pos_ + 8, len);
    std::uint32_t crc;
    std::memcpy(&crc, data_.data() + pos_ + 8 + len, 4);
    if (crc != crc32_of(payload)) throw FormatError("section " + name + ": checksum mismatch");
    pos_ += 8 + len + 4;
    return payload;
  }

  template <typename T>
  std::vector<T> array_section(const std::string& name, std::size_t expected_count) {
    auto payload = section(name);
    if (payload.size() != expected_count * sizeof(T))
      throw FormatError("section " + name + ": expected " +
                        std::to_string(expected_count * sizeof(T)) + " bytes, found " +
                        std::to_string(payload.size()));
    std::vector<T> out(expected_count);
    std::memcpy(out.data(), payload.data(), payload.size());
    return out;
  }

private:
  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::uint32_t version_ = 0;
};

}  // namespace flowsig::io
