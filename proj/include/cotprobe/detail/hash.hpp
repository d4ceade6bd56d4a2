#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace cotprobe::detail {

// 64-bit FNV-1a. Stable across platforms and runs, which std::hash is not.
class Fnv1a {
 public:
  Fnv1a& add(std::string_view bytes) {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }

  // Length-prefixed field so ("ab","c") and ("a","bc") hash differently.
  Fnv1a& field(std::string_view bytes) {
    const std::uint64_t n = bytes.size();
    for (int i = 0; i < 8; ++i) {
      const char b = static_cast<char>((n >> (8 * i)) & 0xFF);
      add(std::string_view(&b, 1));
    }
    return add(bytes);
  }

  std::uint64_t value() const noexcept { return state_; }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t hash64(std::string_view bytes) {
  return Fnv1a{}.add(bytes).value();
}

}  // namespace cotprobe::detail
