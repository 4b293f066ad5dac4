#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include <openssl/evp.h>
#include <zlib.h>

#include "didi/errors.hpp"
#include "didi/numerics.hpp"

namespace didi {

inline std::string to_hex(const unsigned char* bytes, std::size_t n) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(kHex[bytes[i] >> 4]);
    out.push_back(kHex[bytes[i] & 0xF]);
  }
  return out;
}

/// Lowercase hex SHA-256.
inline std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::io, "sha256 computation failed");
  }
  return to_hex(md.data(), len);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::missing_artifact, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string file_sha256(const std::string& path) { return sha256_hex(read_file_bytes(path)); }

inline std::uint32_t crc32_of(std::string_view data) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size()));
  return static_cast<std::uint32_t>(crc);
}

/// Digest of a parameter vector's exact bytes (little-endian float64).
inline std::string params_digest(const Vec& v) {
  std::string bytes;
  bytes.reserve(static_cast<std::size_t>(v.size()) * 8);
  for (Index i = 0; i < v.size(); ++i) {
    std::uint64_t u;
    static_assert(sizeof(u) == sizeof(double));
    std::memcpy(&u, &v[i], 8);
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
  }
  return sha256_hex(bytes);
}

}  // namespace didi
