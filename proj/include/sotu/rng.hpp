#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace sotu {

/// SplitMix64 finalizer. Used as the mixing step of every seed derivation
/// and of the counter-based uniform generator.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child seed for a named sub-stream. Deriving with distinct `stream` values
/// never perturbs siblings, so adding tasks leaves earlier ones untouched.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  return mix64(mix64(seed) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

/// Stateless uniform in [0,1) keyed by (seed, a, b). The same key always
/// yields the same value regardless of evaluation order.
constexpr double counter_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b) noexcept {
  const std::uint64_t h = mix64(derive_seed(seed, a) ^ mix64(b));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Sequential generator with platform-independent draws: only the raw
/// 64-bit output of mt19937_64 is used, never the implementation-defined
/// standard distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sotu
