#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cotprobe::detail {

// Decoded view of a UTF-8 string: one code point per entry plus the byte
// offset where each starts. byte_offset has size()+1 entries, the last one
// equal to the byte length, so a code-point offset maps to a byte offset
// by direct lookup. Invalid bytes decode as U+FFFD covering one byte.
struct Utf8Index {
  std::vector<char32_t> cps;
  std::vector<std::size_t> byte_offset;

  std::size_t size() const noexcept { return cps.size(); }
};

inline Utf8Index index_utf8(std::string_view s) {
  Utf8Index out;
  out.cps.reserve(s.size());
  out.byte_offset.reserve(s.size() + 1);
  std::size_t i = 0;
  const auto byte = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
  while (i < s.size()) {
    out.byte_offset.push_back(i);
    const unsigned char b0 = byte(i);
    std::size_t len = 1;
    char32_t cp = 0xFFFD;
    if (b0 < 0x80) {
      cp = b0;
    } else if ((b0 >> 5) == 0x6) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 >> 4) == 0xE) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 >> 3) == 0x1E) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      len = 0;
    }
    bool ok = len > 0 && i + len <= s.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      if ((byte(i + k) >> 6) != 0x2) ok = false;
      else cp = (cp << 6) | (byte(i + k) & 0x3F);
    }
    if (!ok) {
      cp = 0xFFFD;
      len = 1;
    }
    out.cps.push_back(cp);
    i += len;
  }
  out.byte_offset.push_back(s.size());
  return out;
}

inline bool is_space(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' ||
         c == U'\v' || c == 0x00A0 || c == 0x2028 || c == 0x2029 ||
         c == 0x3000 || (c >= 0x2000 && c <= 0x200A);
}

// Combining marks and joiners that must stay attached to the preceding
// scalar value. A cut in front of one of these would split a cluster.
inline bool is_combining(char32_t c) {
  return (c >= 0x0300 && c <= 0x036F) || (c >= 0x1AB0 && c <= 0x1AFF) ||
         (c >= 0x1DC0 && c <= 0x1DFF) || (c >= 0x20D0 && c <= 0x20FF) ||
         (c >= 0xFE20 && c <= 0xFE2F) || (c >= 0xFE00 && c <= 0xFE0F) ||
         c == 0x200D || (c >= 0xDC00 && c <= 0xDFFF);
}

inline char32_t ascii_lower(char32_t c) {
  return (c >= U'A' && c <= U'Z') ? c + 32 : c;
}

inline std::string encode_utf8(char32_t c) {
  std::string out;
  if (c < 0x80) {
    out.push_back(static_cast<char>(c));
  } else if (c < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (c >> 6)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  } else if (c < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (c >> 12)));
    out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (c >> 18)));
    out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  }
  return out;
}

}  // namespace cotprobe::detail
