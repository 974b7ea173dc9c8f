#pragma once

// Counter-based splittable RNG.  Streams are identified by (key, counter);
// child streams derive their key from the parent key and a label or index, so
// adding a new consumer never shifts the draws of an existing one.  State is
// two u64 values, which makes checkpointing trivial.

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "memcom/common.hpp"

namespace memcom {

namespace detail {

// splitmix64 finalizer, a full 64-bit permutation with good avalanche.
inline uint64_t mix64(uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(detail::mix64(seed ^ 0xA02B0C1D2E3F4A5Bull)), ctr_(0) {}
  Rng(uint64_t key, uint64_t ctr, bool raw) : key_(key), ctr_(ctr) { (void)raw; }

  // Derive an independent child stream.  Neither call advances this stream.
  Rng split(std::string_view label) const {
    return Rng(detail::mix64(key_ ^ detail::mix64(detail::fnv1a(label))), 0, true);
  }
  Rng split(uint64_t index) const {
    return Rng(detail::mix64(key_ ^ detail::mix64(index ^ 0x517CC1B727220A95ull)), 0, true);
  }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return ctr_; }

  uint64_t next_u64() { return detail::mix64(key_ ^ detail::mix64(ctr_++)); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Inclusive on both ends.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    MEMCOM_CHECK(lo <= hi, "uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<int64_t>(next_u64());  // full 64-bit range
    // Rejection sampling removes modulo bias.
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return lo + static_cast<int64_t>(v % span);
  }

  // Standard normal via Box-Muller; draws two uniforms per call, keeps no
  // cached spare so the state stays two words.
  double normal() {
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t key_;
  uint64_t ctr_;
};

}  // namespace memcom
