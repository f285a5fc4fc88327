#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace tinydistill {

// Counter-based deterministic RNG. Every consumer derives its own stream from
// the single run seed plus a named path (e.g. {kStreamAugment, epoch, image_id,
// view}); results are therefore independent of batch order and thread count.
// We avoid std::uniform_*_distribution on purpose: distribution algorithms are
// implementation-defined, and the artifact promises bit-identical replays.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Substream ids used across the project. Values are arbitrary but frozen:
// changing them changes every "deterministic in seed" artifact.
enum : std::uint64_t {
  kStreamInit = 0x01,
  kStreamAugment = 0x02,
  kStreamShuffle = 0x03,
  kStreamSynthData = 0x04,
  kStreamSynthTeacher = 0x05,
  kStreamProbe = 0x06,
  kStreamTest = 0x07,
};

class RngStream {
 public:
  RngStream() : state_(0) {}

  explicit RngStream(std::uint64_t root, std::initializer_list<std::uint64_t> path = {}) {
    state_ = root;
    (void)splitmix64(state_);
    for (std::uint64_t p : path) {
      state_ ^= p + 0x9e3779b97f4a7c15ULL + (state_ << 6) + (state_ >> 2);
      (void)splitmix64(state_);
    }
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n), n > 0. Modulo bias is negligible for the
  // small n used here (dataset sizes, class counts).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  bool bernoulli(double p) { return next_double() < p; }

  // Box-Muller; consumes exactly two uniforms per call.
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

 private:
  std::uint64_t state_;
};

}  // namespace tinydistill
