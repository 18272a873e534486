#pragma once

#include <algorithm>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "laffi/tensor.hpp"

namespace laffi {

// Byte-level vocabulary: ids 0-255 are raw UTF-8 bytes, followed by three
// special tokens.
inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kPad = 258;
inline constexpr int kByteVocabSize = 259;

inline bool is_special(TokenId id) { return id >= 256; }

inline std::vector<TokenId> tokenize(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (const char c : text) ids.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
  return ids;
}

// Special and out-of-range ids contribute nothing.
inline std::string detokenize(std::span<const TokenId> ids) {
  std::string out;
  out.reserve(ids.size());
  for (const TokenId id : ids)
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  return out;
}

// Bytes from the model need not form valid UTF-8; JSON artifacts require it.
// Each maximal invalid subsequence becomes U+FFFD.
inline std::string to_valid_utf8(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  const auto byte = [&](std::size_t i) { return static_cast<unsigned char>(s[i]); };
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = byte(i);
    std::size_t len = 0;
    unsigned char lo = 0x80, hi = 0xBF;
    if (c < 0x80) len = 1;
    else if (c >= 0xC2 && c <= 0xDF) len = 2;
    else if (c >= 0xE0 && c <= 0xEF) {
      len = 3;
      if (c == 0xE0) lo = 0xA0;
      if (c == 0xED) hi = 0x9F;
    } else if (c >= 0xF0 && c <= 0xF4) {
      len = 4;
      if (c == 0xF0) lo = 0x90;
      if (c == 0xF4) hi = 0x8F;
    }
    std::size_t ok = len ? 1 : 0;
    while (ok && ok < len && i + ok < s.size()) {
      const unsigned char b = byte(i + ok);
      if (b < (ok == 1 ? lo : 0x80) || b > (ok == 1 ? hi : 0xBF)) break;
      ++ok;
    }
    if (len && ok == len) {
      out.append(s.substr(i, len));
      i += len;
    } else {
      out += "\xEF\xBF\xBD";
      i += std::max<std::size_t>(ok, 1);
    }
  }
  return out;
}

// Human-readable label for one token, used for attention heatmap axes.
inline std::string token_label(TokenId id) {
  switch (id) {
    case kBos: return "<bos>";
    case kEos: return "<eos>";
    case kPad: return "<pad>";
    case '\n': return "\\n";
    case '\t': return "\\t";
    default: break;
  }
  if (id >= 32 && id < 127) return std::string(1, static_cast<char>(id));
  char buf[8];
  std::snprintf(buf, sizeof buf, "\\x%02x", static_cast<unsigned>(id) & 0xffu);
  return buf;
}

}  // namespace laffi
