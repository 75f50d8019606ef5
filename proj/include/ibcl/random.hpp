#pragma once

#include <cstdint>
#include <random>

namespace ibcl {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent child seeds so that every
// training run, query and evaluation owns its own stream.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
    std::uint64_t s = mix_seed(seed);
    s = mix_seed(s ^ a);
    s = mix_seed(s ^ (b * 0x632be59bd9b4e019ULL));
    s = mix_seed(s ^ (c * 0x8cb92ba72f3d8dd7ULL));
    return s;
}

} // namespace ibcl
