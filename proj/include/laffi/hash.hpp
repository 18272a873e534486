#pragma once

// Content hashes: SHA-256 fingerprints for prompts, git-style blob ids for
// input files, and a small deterministic mixer for deriving sub-seeds.

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "laffi/errors.hpp"

namespace laffi {

namespace detail {

inline std::string digest_hex(const EVP_MD* md, std::string_view prefix, std::string_view data) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw Error("hash_error", "EVP_MD_CTX_new failed");
  std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
  unsigned int len = 0;
  const bool ok = EVP_DigestInit_ex(ctx, md, nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, prefix.data(), prefix.size()) == 1 &&
                  EVP_DigestUpdate(ctx, data.data(), data.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, out.data(), &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw Error("hash_error", "digest computation failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string s;
  s.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    s.push_back(hex[out[i] >> 4]);
    s.push_back(hex[out[i] & 15]);
  }
  return s;
}

}  // namespace detail

inline std::string sha256_hex(std::string_view data) { return detail::digest_hex(EVP_sha256(), {}, data); }

// Same id `git hash-object` prints for a file with these contents.
inline std::string git_blob_sha1(std::string_view data) {
  const std::string header = "blob " + std::to_string(data.size()) + '\0';
  return detail::digest_hex(EVP_sha1(), header, data);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed for a named sub-stream of a global seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view key) {
  std::uint64_t h = splitmix64(seed);
  for (const unsigned char c : key) h = splitmix64(h ^ c);
  return h;
}

}  // namespace laffi
