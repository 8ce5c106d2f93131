#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace aimkp {

// All randomness in a run flows from one named seed. Sub-streams are derived
// by hashing a label (and optional index) into the base seed, so adding a new
// consumer never perturbs existing streams.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t base, std::string_view stream, uint64_t index = 0) {
    return splitmix64(base ^ splitmix64(fnv1a64(stream) + index));
}

inline std::mt19937_64 make_rng(uint64_t base, std::string_view stream, uint64_t index = 0) {
    return std::mt19937_64(derive_seed(base, stream, index));
}

} // namespace aimkp
