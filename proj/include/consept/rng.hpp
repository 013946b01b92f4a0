#pragma once

#include <cstdint>
#include <cmath>
#include <vector>

namespace consept {

// Deterministic PRNG with explicit stream splitting. We avoid the standard
// <random> distributions because their output is not pinned by the standard;
// every draw here is reproducible bit-for-bit across builds.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // splitmix64 warm-up so nearby seeds decorrelate
        next_u64();
        next_u64();
    }

    // Child stream derived from this seed and a stream id. Independent streams
    // let corpus samples be generated out of order without changing content.
    static Rng split(uint64_t seed, uint64_t stream) {
        return Rng(seed ^ (0x9e3779b97f4a7c15ULL * (stream + 0x632be59bd9b4e019ULL)));
    }

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    int range(int lo, int hi_inclusive) {
        return lo + static_cast<int>(below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    // standard normal via Box-Muller (cached spare kept for determinism)
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // truncated normal in [-2, 2] sigma, the usual transformer init
    double trunc_normal(double stddev) {
        double x = normal();
        while (x < -2.0 || x > 2.0) x = normal();
        return x * stddev;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace consept
