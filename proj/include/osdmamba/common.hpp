#pragma once

#include <cstdint>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace osd {

using Shape = std::vector<int64_t>;

// Error hierarchy. Dimension/contract errors signal caller bugs, numeric
// errors signal non-finite values, data errors signal bad external input.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Deterministic RNG. All randomness in the library flows through this so a
// fixed seed gives bit-identical runs on one machine. The raw engine is
// mt19937_64; the value transforms below are written out explicitly instead
// of using std::*_distribution, whose output is implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix(seed)) {}

    uint64_t next_u64() {
        // xorshift* step seeded via splitmix; fast and adequate here
        uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545F4914F6CDD1DULL;
    }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (always consumes two uniforms)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // integer in [0, n)
    int64_t below(int64_t n) { return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n)); }

    // independent child stream
    Rng fork(uint64_t tag) { return Rng(state_ ^ (0x9E3779B97F4A7C15ULL * (tag + 1))); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
            int64_t j = below(i + 1);
            std::swap(v[i], v[j]);
        }
    }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        x = x ^ (x >> 31);
        return x ? x : 0x1ULL;
    }

    uint64_t state_;
};

}  // namespace osd
