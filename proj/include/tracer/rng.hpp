#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace tracer {

// Seeded RNG with explicit transforms so streams are identical across
// platforms (std:: distributions are implementation-defined).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; caches the second draw.
    double normal();

    // Uniform index in [0, n) via rejection sampling (unbiased).
    std::size_t index(std::size_t n);

    // In-place Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Fresh deterministic child stream (for per-task seeding).
    std::uint64_t derive() { return gen_() ^ 0x9e3779b97f4a7c15ULL; }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace tracer
