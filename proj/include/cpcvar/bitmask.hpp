#pragma once

#include <cstdint>
#include <cstddef>
#include <vector>

#include "cpcvar/errors.hpp"

namespace cpcvar {

// Fixed-length bit vector used for parameter masks. Storage is one byte per
// 8 bits so the serialized form is exactly ceil(size/8) bytes.
class BitMask {
 public:
  BitMask() = default;
  explicit BitMask(size_t size) : size_(size), bytes_((size + 7) / 8, 0) {}

  size_t size() const { return size_; }

  bool test(size_t i) const { return (bytes_[i >> 3] >> (i & 7)) & 1; }

  void set(size_t i, bool value = true) {
    uint8_t bit = static_cast<uint8_t>(1u << (i & 7));
    if (value)
      bytes_[i >> 3] |= bit;
    else
      bytes_[i >> 3] &= static_cast<uint8_t>(~bit);
  }

  size_t popcount() const {
    size_t n = 0;
    for (uint8_t b : bytes_) n += static_cast<size_t>(__builtin_popcount(b));
    return n;
  }

  BitMask operator|(const BitMask& other) const {
    check_same_size(other);
    BitMask out(size_);
    for (size_t i = 0; i < bytes_.size(); ++i) out.bytes_[i] = bytes_[i] | other.bytes_[i];
    return out;
  }

  BitMask operator&(const BitMask& other) const {
    check_same_size(other);
    BitMask out(size_);
    for (size_t i = 0; i < bytes_.size(); ++i) out.bytes_[i] = bytes_[i] & other.bytes_[i];
    return out;
  }

  BitMask& operator|=(const BitMask& other) {
    check_same_size(other);
    for (size_t i = 0; i < bytes_.size(); ++i) bytes_[i] |= other.bytes_[i];
    return *this;
  }

  bool operator==(const BitMask& other) const {
    return size_ == other.size_ && bytes_ == other.bytes_;
  }

  bool is_subset_of(const BitMask& other) const {
    check_same_size(other);
    for (size_t i = 0; i < bytes_.size(); ++i)
      if (bytes_[i] & ~other.bytes_[i]) return false;
    return true;
  }

  bool any() const {
    for (uint8_t b : bytes_)
      if (b) return true;
    return false;
  }

  std::vector<size_t> set_indices() const {
    std::vector<size_t> out;
    for (size_t i = 0; i < size_; ++i)
      if (test(i)) out.push_back(i);
    return out;
  }

  const std::vector<uint8_t>& bytes() const { return bytes_; }

  static BitMask from_bytes(const std::vector<uint8_t>& bytes, size_t size) {
    if (bytes.size() != (size + 7) / 8)
      throw StateError("BitMask::from_bytes: byte count does not match size");
    BitMask m(size);
    m.bytes_ = bytes;
    return m;
  }

 private:
  void check_same_size(const BitMask& other) const {
    if (size_ != other.size_)
      throw ShapeError("BitMask: size mismatch (" + std::to_string(size_) + " vs " +
                       std::to_string(other.size_) + ")");
  }

  size_t size_ = 0;
  std::vector<uint8_t> bytes_;
};

}  // namespace cpcvar
