#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace atlasgen {

// FNV-1a; used for seed derivation and content hashes in manifests.
inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 14695981039346656037ull) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 14695981039346656037ull) {
    return fnv1a64(s.data(), s.size(), h);
}

// Deterministic RNG with hand-rolled distributions. std::*_distribution output
// is implementation-defined, so uniform/normal are fully specified here to keep
// every run byte-reproducible for a given seed.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    // Stream derivation: independent child stream for (seed, label).
    static Rng derive(uint64_t seed, const std::string& label) {
        return Rng(fnv1a64(label, seed ^ 0x9e3779b97f4a7c15ull));
    }
    Rng derive(const std::string& label) const {
        return Rng(fnv1a64(label, eng_state_hash()));
    }

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int64_t uniform_int(int64_t n) {
        // Rejection-free modulo bias is negligible for our n << 2^64; keep it simple
        // and fully deterministic.
        return static_cast<int64_t>(eng_() % static_cast<uint64_t>(n));
    }

    // Standard normal via Box-Muller (cached pair).
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    // State (de)serialization for checkpoint-resume equality.
    std::string save_state() const {
        std::ostringstream os;
        os << eng_ << " " << (has_cached_ ? 1 : 0) << " ";
        os.precision(17);
        os << cached_;
        return os.str();
    }
    void load_state(const std::string& s) {
        std::istringstream is(s);
        int hc = 0;
        is >> eng_ >> hc >> cached_;
        has_cached_ = (hc != 0);
    }

private:
    uint64_t eng_state_hash() const {
        std::ostringstream os;
        os << eng_;
        return fnv1a64(os.str());
    }

    std::mt19937_64 eng_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

} // namespace atlasgen
