#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace otf {

// Deterministic per-label random streams: the same (seed, label) pair always
// yields the same sequence, different labels give independent streams.
class SeededRng {
 public:
  SeededRng(uint64_t seed, const std::string& stream_label)
      : engine_(mix(seed, stream_label)) {}

  std::mt19937_64& engine() { return engine_; }

  uint64_t nextU64() { return engine_(); }

  // Uniform in [0, 1). Derived from raw engine output so the mapping is fixed
  // across standard library implementations.
  double uniform() { return double(engine_() >> 11) * (1.0 / 9007199254740992.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniformInt(int lo, int hi) {  // inclusive bounds
    return lo + int(uint64_t(uniform() * (double(hi) - lo + 1)));
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = uniform(-1.0, 1.0);
      v = uniform(-1.0, 1.0);
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    have_spare_ = true;
    return u * f;
  }

 private:
  static uint64_t mix(uint64_t seed, const std::string& label) {
    // FNV-1a over the label, folded into the seed.
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : label) {
      h ^= c;
      h *= 1099511628211ull;
    }
    uint64_t x = seed ^ h;
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdull;
    x ^= x >> 33;
    x *= 0xc4ceb9fe1a85ec53ull;
    x ^= x >> 33;
    return x;
  }

  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0;
};

}  // namespace otf
