#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace synergen {

// All randomness in a run flows from one root seed through named substreams,
// so individual components can be re-seeded or replayed independently.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t derive_seed(uint64_t root, std::string_view stream, uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = splitmix64(root ^ hash_str(stream));
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    return h;
}

inline std::mt19937_64 make_engine(uint64_t root, std::string_view stream, uint64_t a = 0, uint64_t b = 0) {
    return std::mt19937_64(derive_seed(root, stream, a, b));
}

}  // namespace synergen
