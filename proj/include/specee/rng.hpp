#pragma once

#include <cstddef>
#include <cstdint>

namespace specee {

/// splitmix64; chosen because its output is trivially reproducible in any
/// language, unlike the std:: engines' distributions.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next()
    {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 24 bits of mantissa.
    float uniform() { return static_cast<float>(next() >> 40) * (1.0f / 16777216.0f); }

    double uniform_double() { return static_cast<double>(next() >> 11) * (1.0 / 9007199254740992.0); }

    /// Uniform in [-bound, bound).
    float symmetric(float bound) { return (2.0f * uniform() - 1.0f) * bound; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next() % n; }

private:
    std::uint64_t state_;
};

/// FNV-1a 64-bit.
inline std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL)
{
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace specee
