#pragma once

// Seeded, fully deterministic randomness. Every consumer derives its own
// stream from the one master seed via derive_seed(), so work items can run
// in any order (or in parallel) without changing results.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace protolab {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  return splitmix64(base ^ splitmix64(tag * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL));
}

template <class... Rest>
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag,
                                    Rest... rest) {
  return derive_seed(derive_seed(base, tag), rest...);
}

// mt19937_64 engine with hand-rolled double conversions (the std
// distributions are implementation-defined; these are not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

  // uniform integer in [0, n)
  std::size_t below(std::size_t n) {
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Box-Muller; consumes exactly two raw draws per call
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  Rng fork(std::uint64_t tag) const { return Rng(derive_seed(seed_, tag)); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace protolab
