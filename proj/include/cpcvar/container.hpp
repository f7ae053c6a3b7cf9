#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace cpcvar {

// Versioned binary artifact container. Layout, all little-endian:
//
//   magic "CPCV" | version u32 | section count u32
//   per section: name (u32 len + bytes) | kind u8 | ndim u32 | dims u64[ndim]
//                | payload
//
// Kinds: 0 = f64 array, 1 = i64 array, 2 = raw bytes, 3 = utf8 string.
// Tokenizer artifacts, model checkpoints and ledgers all use this format.
class Container {
 public:
  static constexpr uint32_t kFormatVersion = 1;

  void put_f64(const std::string& name, const std::vector<double>& data,
               const std::vector<uint64_t>& shape);
  void put_i64(const std::string& name, const std::vector<int64_t>& data);
  void put_bytes(const std::string& name, const std::vector<uint8_t>& data);
  void put_string(const std::string& name, const std::string& data);

  bool has(const std::string& name) const;
  const std::vector<double>& get_f64(const std::string& name) const;
  const std::vector<uint64_t>& shape_of(const std::string& name) const;
  const std::vector<int64_t>& get_i64(const std::string& name) const;
  const std::vector<uint8_t>& get_bytes(const std::string& name) const;
  const std::string& get_string(const std::string& name) const;

  std::vector<uint8_t> serialize() const;
  static Container deserialize(const std::vector<uint8_t>& bytes);

  void save(const std::string& path) const;
  static Container load(const std::string& path);

  // SHA-256 of the serialized image; the content hash recorded in reports.
  std::string content_hash() const;

  std::vector<std::string> names() const;

 private:
  struct Section {
    uint8_t kind = 0;
    std::vector<uint64_t> shape;
    std::vector<double> f64;
    std::vector<int64_t> i64;
    std::vector<uint8_t> bytes;
    std::string str;
  };

  const Section& section(const std::string& name, uint8_t kind) const;

  // Ordered map: serialized byte stream is independent of insertion order.
  std::map<std::string, Section> sections_;
};

}  // namespace cpcvar
