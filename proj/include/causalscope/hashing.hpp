#pragma once

#include <cstdint>
#include <string_view>

namespace causalscope {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Independent stream seed for a named sub-task.
inline std::uint64_t sub_seed(std::uint64_t seed, std::string_view key) { return splitmix64(seed ^ fnv1a(key)); }

} // namespace causalscope
