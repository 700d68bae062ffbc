#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace lungmtl {

// splitmix64 generator. Hand-rolled so that seeded streams are identical
// across standard libraries and build configurations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller, one spare cached
  double normal();

  // unbiased integer in [0, n)
  uint64_t below(uint64_t n);

  // Fisher-Yates
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

uint64_t fnv1a(std::string_view s);

// Derives an independent stream for a named component of a seeded run.
uint64_t mix_seed(uint64_t seed, std::string_view tag);

}  // namespace lungmtl
