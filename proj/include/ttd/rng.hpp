#pragma once

#include <cstdint>

namespace ttd {

/// SplitMix64 finalizer. Used as the mixing function of the counter RNG.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based generator: the n-th draw of a stream is a pure function of
/// (key, n), so streams can be split and replayed without shared state.
class CounterRng {
 public:
  constexpr explicit CounterRng(std::uint64_t seed = 0) noexcept : key_(mix64(seed)) {}

  /// Independent child stream identified by `stream_id`.
  [[nodiscard]] constexpr CounterRng split(std::uint64_t stream_id) const noexcept {
    CounterRng child;
    child.key_ = mix64(key_ ^ mix64(stream_id + 0x632be59bd9b4e019ULL));
    return child;
  }

  [[nodiscard]] constexpr std::uint64_t at(std::uint64_t counter) const noexcept {
    return mix64(key_ + mix64(counter));
  }

  constexpr std::uint64_t next_u64() noexcept { return at(counter_++); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double next_unit() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * next_unit(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  [[nodiscard]] constexpr std::uint64_t position() const noexcept { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

/// Unit-interval value of draw `counter` without advancing any state.
inline double unit_at(const CounterRng& rng, std::uint64_t counter) noexcept {
  return static_cast<double>(rng.at(counter) >> 11) * 0x1.0p-53;
}

/// Deterministic Fisher-Yates shuffle.
template <class RandomIt>
void shuffle(RandomIt first, RandomIt last, CounterRng& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng.below(i);
    using std::swap;
    swap(first[i - 1], first[j]);
  }
}

}  // namespace ttd
