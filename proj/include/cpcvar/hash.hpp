#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cpcvar {

// SHA-256 over a byte buffer, returned as lowercase hex. Backed by OpenSSL.
std::string sha256_hex(const uint8_t* data, size_t len);
std::string sha256_hex(const std::vector<uint8_t>& data);
std::string sha256_hex(const std::string& data);

// Hash of a vector of doubles through its little-endian byte image.
std::string sha256_hex(const std::vector<double>& data);

// Hash of a file's contents.
std::string sha256_file(const std::string& path);

}  // namespace cpcvar
