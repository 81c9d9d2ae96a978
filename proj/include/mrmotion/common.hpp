#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mrmotion {

// Error taxonomy, mirrored by the CLI exit codes (1/2/3).
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// splitmix64: the seed-mixing primitive used everywhere randomness is needed.
// All randomness in this project is a pure function of (seed, purpose), never
// a shared mutable stream, so results are identical across thread schedules.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Derive a child seed from (seed, index). Used for per-structure, per-slice
// and per-subject streams.
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
    uint64_t s = seed ^ (0x632be59bd9b4e019ULL * (index + 1));
    uint64_t a = splitmix64(s);
    uint64_t b = splitmix64(s);
    return a ^ (b << 1);
}

// Small deterministic RNG built on splitmix64.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_index(uint64_t n) {
        return n == 0 ? 0 : next_u64() % n;
    }

    // standard normal via Box-Muller
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    uint64_t state_;
};

// Kahan compensated accumulator; keeps aggregate means stable to well below
// 1e-9 regardless of summation length.
class KahanSum {
  public:
    void add(double x) {
        double y = x - comp_;
        double t = sum_ + y;
        comp_ = (t - sum_) - y;
        sum_ = t;
        ++count_;
    }
    double sum() const { return sum_; }
    int64_t count() const { return count_; }
    double mean() const { return count_ == 0 ? 0.0 : sum_ / static_cast<double>(count_); }

  private:
    double sum_ = 0.0;
    double comp_ = 0.0;
    int64_t count_ = 0;
};

inline double stable_mean(const std::vector<double>& xs) {
    KahanSum k;
    for (double x : xs) k.add(x);
    return k.mean();
}

inline double stable_std(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    double m = stable_mean(xs);
    KahanSum k;
    for (double x : xs) k.add((x - m) * (x - m));
    return std::sqrt(k.sum() / static_cast<double>(xs.size()));
}

inline bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

inline const char* version_string() { return "mrmotion 0.1.0"; }

} // namespace mrmotion
