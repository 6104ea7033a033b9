#include "splitshield/rng.hpp"

#include <cmath>

namespace splitshield {

namespace {
constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
}  // namespace

std::uint64_t SeedStream::next_u64() {
    state_ += kGolden;
    return mix(state_);
}

double SeedStream::next_unit() {
    // Top 53 bits -> [0, 1).
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

float SeedStream::next_uniform(float lo, float hi) {
    return lo + static_cast<float>(next_unit()) * (hi - lo);
}

float SeedStream::next_normal(float mean, float stddev) {
    if (has_spare_) {
        has_spare_ = false;
        return mean + stddev * static_cast<float>(spare_);
    }
    double u, v, s;
    do {
        u = 2.0 * next_unit() - 1.0;
        v = 2.0 * next_unit() - 1.0;
        s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double r = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * r;
    has_spare_ = true;
    return mean + stddev * static_cast<float>(u * r);
}

std::uint64_t SeedStream::next_below(std::uint64_t bound) {
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = bound * (UINT64_MAX / bound);
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % bound;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a offset basis
    for (char ch : purpose) {
        h ^= static_cast<unsigned char>(ch);
        h *= 0x100000001b3ULL;
    }
    return mix(master ^ mix(h));
}

SeedStream derive_stream(std::uint64_t master, std::string_view purpose) {
    return SeedStream(derive_seed(master, purpose));
}

}  // namespace splitshield
