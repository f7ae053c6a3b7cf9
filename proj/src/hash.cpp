#include "cpcvar/hash.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>

#include "cpcvar/errors.hpp"

namespace cpcvar {

std::string sha256_hex(const uint8_t* data, size_t len) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int digest_len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data, len) != 1 ||
      EVP_DigestFinal_ex(ctx, digest, &digest_len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw StateError("sha256: digest computation failed");
  }
  EVP_MD_CTX_free(ctx);

  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(digest_len * 2);
  for (unsigned int i = 0; i < digest_len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_hex(const std::vector<uint8_t>& data) {
  return sha256_hex(data.data(), data.size());
}

std::string sha256_hex(const std::string& data) {
  return sha256_hex(reinterpret_cast<const uint8_t*>(data.data()), data.size());
}

std::string sha256_hex(const std::vector<double>& data) {
  std::vector<uint8_t> bytes(data.size() * 8);
  for (size_t i = 0; i < data.size(); ++i) {
    uint64_t bits;
    std::memcpy(&bits, &data[i], 8);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<uint8_t>(bits >> (8 * b));
  }
  return sha256_hex(bytes);
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StateError("sha256_file: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

}  // namespace cpcvar
