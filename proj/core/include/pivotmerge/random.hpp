#pragma once

#include <array>
#include <cstdint>

namespace pivotmerge {

// Philox4x32-10 (Salmon et al., "Parallel random numbers: as easy as 1, 2,
// 3"). Stateless: every output is a pure function of (key, counter), so
// draws are reproducible across platforms and independent of call order.
class Philox4x32 {
public:
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static Counter block(Counter counter, Key key);
};

// Mixes a 64-bit value (splitmix64 finalizer).
std::uint64_t mix64(std::uint64_t x);

// Derives an independent 64-bit seed from a parent seed and an ordinal.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t ordinal);

// A keyed stream of random values addressed by a 64-bit index.
class CounterStream {
public:
    CounterStream(std::uint64_t seed, std::uint64_t stream);

    // Uniform in the open interval (0, 1) with 53 random bits.
    double uniform(std::uint64_t index) const;

    // Standard normal via Box-Muller; indices 2j and 2j+1 share one block.
    double normal(std::uint64_t index) const;

private:
    Philox4x32::Counter counter(std::uint64_t index) const;

    Philox4x32::Key key_;
    std::uint64_t stream_;
};

} // namespace pivotmerge
