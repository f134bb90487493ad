#pragma once

#include <cstdint>

#include "warpattn/common.hpp"

namespace warpattn {

// PCG32 (Melissa O'Neill's pcg32_random_r). Integer state transitions only,
// so the same seed yields the same stream on every platform.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed, std::uint64_t stream = 0)
      : state_(0), inc_((stream << 1u) | 1u) {
    next_u32();
    state_ += seed;
    next_u32();
  }

  std::uint32_t next_u32() {
    std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    std::uint32_t xorshifted =
        static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  std::uint64_t next_u64() {
    std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Uniform in [0, 1) with 32 bits of resolution.
  double uniform() { return next_u32() * 0x1p-32; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Derive an independent generator; used to give each parameter its own
  // stream so adding parameters does not shift unrelated draws.
  SeededRng fork(std::uint64_t stream) {
    return SeededRng(next_u64(), stream);
  }

 private:
  std::uint64_t state_;
  std::uint64_t inc_;
};

}  // namespace warpattn
