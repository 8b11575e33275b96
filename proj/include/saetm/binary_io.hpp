#pragma once

#include "saetm/common.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace saetm::io {

// Little-endian byte buffers for the versioned binary containers.
class ByteWriter {
 public:
  void magic(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }

  template <typename T>
  void put(T value) {
    static_assert(std::is_arithmetic_v<T>);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    bytes_.insert(bytes_.end(), raw, raw + sizeof(T));
  }

  /// Writes every coefficient of a row-major expression as float32.
  template <typename Derived>
  void put_f32_block(const Eigen::DenseBase<Derived>& block) {
    for (Eigen::Index r = 0; r < block.rows(); ++r)
      for (Eigen::Index c = 0; c < block.cols(); ++c) put(static_cast<float>(block(r, c)));
  }

  const std::vector<unsigned char>& bytes() const { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> bytes) : bytes_(std::move(bytes)) {}

  bool magic(std::string_view tag) {
    if (remaining() < tag.size()) return false;
    if (std::memcmp(bytes_.data() + pos_, tag.data(), tag.size()) != 0) return false;
    pos_ += tag.size();
    return true;
  }

  template <typename T>
  T get() {
    static_assert(std::is_arithmetic_v<T>);
    require(remaining() >= sizeof(T), ErrorCode::EmbSize, "unexpected end of binary data");
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  template <typename Scalar>
  void get_f32_block(Matrix<Scalar>& out) {
    for (Eigen::Index r = 0; r < out.rows(); ++r)
      for (Eigen::Index c = 0; c < out.cols(); ++c) out(r, c) = static_cast<Scalar>(get<float>());
  }

  template <typename Scalar>
  void get_f32_block(Vector<Scalar>& out) {
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = static_cast<Scalar>(get<float>());
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  std::vector<unsigned char> bytes_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::vector<unsigned char>& bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

std::string read_text(const std::filesystem::path& path);

/// Hex SHA-256 of a byte range.
std::string sha256_hex(const void* data, std::size_t size);
inline std::string sha256_hex(std::string_view text) { return sha256_hex(text.data(), text.size()); }
inline std::string sha256_hex(const std::vector<unsigned char>& bytes) {
  return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace saetm::io
