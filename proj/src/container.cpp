#include "cpcvar/container.hpp"

#include <cstring>
#include <fstream>

#include "cpcvar/errors.hpp"
#include "cpcvar/hash.hpp"

namespace cpcvar {

namespace {

constexpr char kMagic[4] = {'C', 'P', 'C', 'V'};

void write_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void write_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void write_f64(std::vector<uint8_t>& out, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, 8);
  write_u64(out, bits);
}

class Reader {
 public:
  Reader(const std::vector<uint8_t>& buf) : buf_(buf) {}

  uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf_[pos_++]) << (8 * i);
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf_[pos_++]) << (8 * i);
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
  std::vector<uint8_t> bytes(size_t n) {
    need(n);
    std::vector<uint8_t> out(buf_.begin() + static_cast<long>(pos_),
                             buf_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return out;
  }
  std::string str(size_t n) {
    need(n);
    std::string out(buf_.begin() + static_cast<long>(pos_),
                    buf_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return out;
  }

 private:
  void need(size_t n) {
    if (pos_ + n > buf_.size()) throw StateError("container: truncated stream");
  }
  const std::vector<uint8_t>& buf_;
  size_t pos_ = 0;
};

}  // namespace

void Container::put_f64(const std::string& name, const std::vector<double>& data,
                        const std::vector<uint64_t>& shape) {
  uint64_t count = 1;
  for (uint64_t d : shape) count *= d;
  if (count != data.size())
    throw ShapeError("container: shape does not cover data for section " + name);
  Section s;
  s.kind = 0;
  s.shape = shape;
  s.f64 = data;
  sections_[name] = std::move(s);
}

void Container::put_i64(const std::string& name, const std::vector<int64_t>& data) {
  Section s;
  s.kind = 1;
  s.shape = {data.size()};
  s.i64 = data;
  sections_[name] = std::move(s);
}

void Container::put_bytes(const std::string& name, const std::vector<uint8_t>& data) {
  Section s;
  s.kind = 2;
  s.shape = {data.size()};
  s.bytes = data;
  sections_[name] = std::move(s);
}

void Container::put_string(const std::string& name, const std::string& data) {
  Section s;
  s.kind = 3;
  s.shape = {data.size()};
  s.str = data;
  sections_[name] = std::move(s);
}

bool Container::has(const std::string& name) const { return sections_.count(name) > 0; }

const Container::Section& Container::section(const std::string& name, uint8_t kind) const {
  auto it = sections_.find(name);
  if (it == sections_.end()) throw StateError("container: missing section " + name);
  if (it->second.kind != kind)
    throw StateError("container: section " + name + " has unexpected kind");
  return it->second;
}

const std::vector<double>& Container::get_f64(const std::string& name) const {
  return section(name, 0).f64;
}

const std::vector<uint64_t>& Container::shape_of(const std::string& name) const {
  auto it = sections_.find(name);
  if (it == sections_.end()) throw StateError("container: missing section " + name);
  return it->second.shape;
}

const std::vector<int64_t>& Container::get_i64(const std::string& name) const {
  return section(name, 1).i64;
}

const std::vector<uint8_t>& Container::get_bytes(const std::string& name) const {
  return section(name, 2).bytes;
}

const std::string& Container::get_string(const std::string& name) const {
  return section(name, 3).str;
}

std::vector<uint8_t> Container::serialize() const {
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  write_u32(out, kFormatVersion);
  write_u32(out, static_cast<uint32_t>(sections_.size()));
  for (const auto& [name, s] : sections_) {
    write_u32(out, static_cast<uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(s.kind);
    write_u32(out, static_cast<uint32_t>(s.shape.size()));
    for (uint64_t d : s.shape) write_u64(out, d);
    switch (s.kind) {
      case 0:
        for (double d : s.f64) write_f64(out, d);
        break;
      case 1:
        for (int64_t v : s.i64) write_u64(out, static_cast<uint64_t>(v));
        break;
      case 2:
        out.insert(out.end(), s.bytes.begin(), s.bytes.end());
        break;
      case 3:
        out.insert(out.end(), s.str.begin(), s.str.end());
        break;
      default:
        throw StateError("container: unknown section kind");
    }
  }
  return out;
}

Container Container::deserialize(const std::vector<uint8_t>& bytes) {
  Reader r(bytes);
  std::string magic = r.str(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw StateError("container: bad magic bytes (expected CPCV)");
  uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw StateError("container: unsupported format version " + std::to_string(version));
  uint32_t count = r.u32();
  Container c;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = r.u32();
    std::string name = r.str(name_len);
    Section s;
    s.kind = r.u8();
    uint32_t ndim = r.u32();
    uint64_t total = 1;
    s.shape.resize(ndim);
    for (uint32_t d = 0; d < ndim; ++d) {
      s.shape[d] = r.u64();
      total *= s.shape[d];
    }
    switch (s.kind) {
      case 0:
        s.f64.resize(total);
        for (uint64_t j = 0; j < total; ++j) s.f64[j] = r.f64();
        break;
      case 1:
        s.i64.resize(total);
        for (uint64_t j = 0; j < total; ++j) s.i64[j] = static_cast<int64_t>(r.u64());
        break;
      case 2:
        s.bytes = r.bytes(total);
        break;
      case 3:
        s.str = r.str(total);
        break;
      default:
        throw StateError("container: unknown section kind in stream");
    }
    c.sections_[name] = std::move(s);
  }
  return c;
}

void Container::save(const std::string& path) const {
  auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StateError("container: cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<long>(bytes.size()));
  if (!out) throw StateError("container: write failed for " + path);
}

Container Container::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StateError("container: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::string Container::content_hash() const { return sha256_hex(serialize()); }

std::vector<std::string> Container::names() const {
  std::vector<std::string> out;
  out.reserve(sections_.size());
  for (const auto& [name, s] : sections_) out.push_back(name);
  return out;
}

}  // namespace cpcvar
