#pragma once

#include <cstdint>

namespace kgmpc {

// Counter-based random stream: every draw is a pure function of
// (seed, stream, counter), so any subset of a campaign can be regenerated
// independently and the result does not depend on execution order.
class CounterRng {
  public:
    CounterRng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

    /// Raw 64-bit word for counter `n` of this stream.
    std::uint64_t word(std::uint64_t n) const { return mix(seed_ ^ mix(stream_ ^ mix(n + 0x9e3779b97f4a7c15ULL))); }

    /// Next word from the internal counter.
    std::uint64_t next() { return word(counter_++); }

    /// Uniform double in [0, 1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    std::uint64_t counter() const { return counter_; }
    void seek(std::uint64_t n) { counter_ = n; }

  private:
    // SplitMix64 finalizer; full-period bijection on 64-bit words.
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace kgmpc
