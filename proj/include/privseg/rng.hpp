// rng.hpp - seeded random streams with exactly reproducible output.
//
// All sampling goes through Rng so that runs are bit-reproducible under a
// seed: the uniform/normal transforms are written out here instead of using
// std::*_distribution (whose output is implementation-defined).
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace privseg {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Order-sensitive combiner for deriving substream seeds.
inline uint64_t mix_seeds(uint64_t a, uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ULL));
}

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : eng_(splitmix64(seed)) {}

  uint64_t u64() { return eng_(); }

  // Uniform in [0,1) with 53 random bits.
  double unit() { return double(eng_() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

  // Uniform integer in [0, n). n must be > 0.
  int64_t below(int64_t n) {
    if (n <= 0) throw std::invalid_argument("Rng::below: n must be positive");
    return static_cast<int64_t>(eng_() % static_cast<uint64_t>(n));
  }

  // Standard normal via Box-Muller (cache-free so state stays serializable).
  double normal() {
    double u1 = unit(), u2 = unit();
    while (u1 == 0.0) u1 = unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  template <typename Seq>
  void shuffle(Seq& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = below(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  std::string save_state() const {
    std::ostringstream ss;
    ss << eng_;
    return ss.str();
  }

  void load_state(const std::string& s) {
    std::istringstream ss(s);
    ss >> eng_;
    if (ss.fail()) throw std::runtime_error("Rng::load_state: malformed state");
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace privseg
