#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace csidiff {

// Counter-based generator built on the splitmix64 finalizer. Each (stream,
// counter) pair maps to one output word, so independently keyed streams can
// be evaluated in any order or in parallel without sequence coupling.
class SplitRng {
public:
  explicit SplitRng(std::uint64_t stream_key) : key_(mix(stream_key)) {}

  // Derives a child stream; used to split one keyed stream per sample.
  SplitRng split(std::uint64_t sub_key) const { return SplitRng(key_ ^ mix(sub_key + 0x9e3779b97f4a7c15ull)); }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9e3779b97f4a7c15ull); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; second value of the pair is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Exponential with the given mean.
  double exponential(double mean) {
    double u = 0.0;
    while (u <= 0.0) u = uniform();
    return -mean * std::log(u);
  }

  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace csidiff
