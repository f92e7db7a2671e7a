#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace nightfuse {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Named seed derivation: every random stream in a run is derived from the
/// global seed plus a stage label and an index, never from ambient state.
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view label,
                                           std::uint64_t index = 0) noexcept
{
    std::uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a offset basis
    for (char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return splitmix64(splitmix64(seed ^ h) + index);
}

/// Explicitly-owned random stream. Not thread safe; give each worker its own.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    float normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    /// Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

    void fill_normal(std::span<float> out)
    {
        for (auto& v : out) v = normal_(engine_);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<float> normal_{0.0f, 1.0f};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

} // namespace nightfuse
