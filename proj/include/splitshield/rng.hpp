#pragma once

#include <cstdint>
#include <string_view>

namespace splitshield {

// Deterministic random stream (splitmix64 core). Distribution sampling is
// hand-rolled so results do not depend on the standard library
// implementation; every stochastic consumer derives its own stream from
// (master_seed, purpose) and never perturbs the others.
class SeedStream {
public:
    explicit SeedStream(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();

    // Uniform in [0, 1).
    double next_unit();
    float next_uniform(float lo, float hi);
    float next_normal(float mean, float stddev);

    // Uniform integer in [0, bound), bound > 0.
    std::uint64_t next_below(std::uint64_t bound);

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stable seed for a named purpose. Hashing is FNV-1a over the purpose string
// mixed into the master seed.
std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose);
SeedStream derive_stream(std::uint64_t master, std::string_view purpose);

}  // namespace splitshield
