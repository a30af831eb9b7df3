#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace microsegnet {

// Deterministic random source. mt19937_64 supplies the raw bit stream; every
// derived draw (uniform, normal, shuffle) is spelled out here instead of
// going through std::*_distribution, whose algorithms differ between
// standard-library implementations. Given a seed, the stream is identical on
// every platform we build on.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Derive an independent stream, e.g. per case index or per epoch.
    static Rng for_stream(std::uint64_t seed, std::uint64_t stream) {
        return Rng(mix(seed, stream));
    }

    // splitmix64-style avalanche of two words.
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return x;
    }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n), rejection-sampled so every value is equally likely.
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<int>(x % un);
    }

    // Standard normal via Box-Muller; the second value of each pair is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double two_pi_u2 = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(two_pi_u2);
        have_spare_ = true;
        return r * std::cos(two_pi_u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal clipped by rejection to |z| <= clip, then scaled.
    double truncated_normal(double stddev, double clip = 2.0) {
        double z = 0.0;
        do {
            z = normal();
        } while (std::abs(z) > clip);
        return z * stddev;
    }

    // Fisher-Yates, explicit so the permutation is seed-stable.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            const int j = uniform_int(i + 1);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace microsegnet
