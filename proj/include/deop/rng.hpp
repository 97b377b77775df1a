#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace deop {

// Deterministic random stream. mt19937_64 is fully specified by the
// standard; the uniform/normal transforms below are hand-rolled so that
// identical seeds give identical doubles regardless of the C++ library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return gen_(); }

  // uniform in [0, 1) with 53 bits of mantissa
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double low, double high) {
    return low + (high - low) * uniform01();
  }

  // Box-Muller, one value per call (no cached spare: the stream position
  // stays a pure function of the call count)
  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925287 * u2);
  }

  // independent child stream for sub-task `index`
  Rng fork(std::uint64_t index) const {
    return Rng(mix(seed_ ^ (0x9e3779b97f4a7c15ULL * (index + 1))));
  }

  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
};

}  // namespace deop
