#pragma once

#include <cstddef>
#include <cstdint>

namespace bitflow::detail {

inline constexpr std::uint64_t kOdd1 = 0x5555555555555555ull;
inline constexpr std::uint64_t kOdd2 = 0x3333333333333333ull;
inline constexpr std::uint64_t kNibble = 0x0F0F0F0F0F0F0F0Full;
inline constexpr std::uint64_t kEvenByte = 0x00FF00FF00FF00FFull;
inline constexpr std::uint64_t kLanes16 = 0x0001000100010001ull;

// Per-byte bit counts of x; every byte lane ends up in [0, 8].
inline std::uint64_t byte_counts(std::uint64_t x) {
  x = x - ((x >> 1) & kOdd1);
  x = (x & kOdd2) + ((x >> 2) & kOdd2);
  return (x + (x >> 4)) & kNibble;
}

// Horizontal sum of eight byte lanes: pair bytes into 16-bit lanes, then one
// multiply-shift reduction.
inline std::uint32_t reduce_lanes(std::uint64_t lanes) {
  const std::uint64_t pairs = (lanes & kEvenByte) + ((lanes >> 8) & kEvenByte);
  return static_cast<std::uint32_t>((pairs * kLanes16) >> 48);
}

// 31 words * 8 bits = 248 keeps every byte lane below 256.
inline constexpr std::size_t kFlushEvery = 31;

inline std::uint32_t xnor_popcount(const std::uint64_t* a, const std::uint64_t* b, std::size_t n) {
  std::uint32_t total = 0;
  std::size_t i = 0;
  while (i < n) {
    const std::size_t stop = (n - i > kFlushEvery) ? i + kFlushEvery : n;
    std::uint64_t lanes = 0;
    for (; i < stop; ++i) lanes += byte_counts(~(a[i] ^ b[i]));
    total += reduce_lanes(lanes);
  }
  return total;
}

}  // namespace bitflow::detail
