#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace adaptq {

/// Seeded stream used everywhere randomness is needed.
using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent substream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// FNV-1a, for folding substream names into seeds.
constexpr std::uint64_t hash_name(std::string_view name) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) noexcept {
    return mix64(seed ^ mix64(hash_name(name)));
}

template <typename... Ints>
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view name, Ints... indices) noexcept {
    std::uint64_t h = derive_seed(seed, name);
    ((h = mix64(h ^ static_cast<std::uint64_t>(indices))), ...);
    return h;
}

inline Rng make_rng(std::uint64_t seed, std::string_view name) { return Rng{derive_seed(seed, name)}; }

/// Uniform double in [0,1) from the top 53 bits of one draw.
template <typename Urbg>
double uniform01(Urbg& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Bernoulli draw with success probability `value`. Consumes exactly one draw,
/// so results are reproducible given (seed, draw position).
template <typename Urbg>
int binarize_answer(double value, Urbg& rng) {
    return uniform01(rng) < value ? 1 : 0;
}

/// Label for training cell (row, column) at a given refit; independent of
/// iteration order.
inline int binarize_cell(double value, std::uint64_t seed, std::uint64_t refit, std::uint64_t row,
                         std::uint64_t column) {
    Rng rng{derive_seed(seed, "binarize", refit, row, column)};
    return binarize_answer(value, rng);
}

}  // namespace adaptq
