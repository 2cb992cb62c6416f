#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace fedlap {

// Deterministic PRNG with named sub-streams. All randomness in a run flows
// from one root seed; sub-streams are derived by hashing (seed, label, a, b)
// so re-running any prefix of the experiment reproduces it exactly. The
// generators are hand-rolled (xoshiro + Box-Muller) to keep bit-level
// reproducibility independent of the standard library version.
class Rng {
public:
    explicit Rng(uint64_t seed) { init(seed); }

    // Derives an independent stream, e.g. substream("client", k, m).
    Rng substream(const std::string& label, uint64_t a = 0, uint64_t b = 0) const {
        uint64_t h = root_;
        for (char c : label) h = mix(h ^ static_cast<uint64_t>(static_cast<unsigned char>(c)));
        h = mix(h ^ a);
        h = mix(h ^ b);
        return Rng(h, true);
    }

    uint64_t next_u64() {
        // xoshiro256** step
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    uint64_t uniform_int(uint64_t n) {
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(6.283185307179586 * u2);
        has_spare_ = true;
        return mag * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    Rng(uint64_t derived, bool) { init(derived); }

    void init(uint64_t seed) {
        root_ = seed;
        uint64_t x = seed;
        for (auto& s : s_) s = mix(x += 0x9e3779b97f4a7c15ULL);
        // avoid the all-zero state
        if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
    }

    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    // splitmix64 finalizer
    static uint64_t mix(uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t root_ = 0;
    uint64_t s_[4] = {};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace fedlap
