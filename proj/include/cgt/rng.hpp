#pragma once

#include <cmath>
#include <cstdint>

namespace cgt {

// Counter-free splittable RNG (splitmix64 core). Every consumer gets its own
// stream derived from (seed, stream key), so batched data generation and
// training are reproducible regardless of evaluation order.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed ^ 0x9e3779b97f4a7c15ull) {}

    // Independent stream keyed by (this stream's seed, key).
    Rng fork(uint64_t key) const {
        uint64_t s = state_;
        s = mix(s + 0x9e3779b97f4a7c15ull * (key + 1));
        s = mix(s ^ 0xbf58476d1ce4e5b9ull);
        return Rng::from_raw(s);
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    int range_int(int lo, int hi_exclusive) {
        return lo + int(below(uint64_t(hi_exclusive - lo)));
    }

    // standard normal, Box-Muller with cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double t = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

private:
    static Rng from_raw(uint64_t raw) {
        Rng r(0);
        r.state_ = raw;
        return r;
    }

    static uint64_t mix(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace cgt
