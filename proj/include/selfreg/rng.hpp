#ifndef SELFREG_RNG_HPP
#define SELFREG_RNG_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace selfreg {

// splitmix64; output sequence is fixed by the seed on every platform,
// unlike the std:: distributions whose streams are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        std::uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    int uniform_int(int lo, int hi) {  // inclusive range
        return lo + int(below(std::uint64_t(hi - lo + 1)));
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u, v, s;
        do {
            u = uniform(-1.0, 1.0);
            v = uniform(-1.0, 1.0);
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return mean + stddev * u * m;
    }

    // k distinct indices from [0, n), in draw order (partial Fisher-Yates)
    std::vector<int> choose(int n, int k) {
        std::vector<int> pool(n);
        for (int i = 0; i < n; ++i) pool[i] = i;
        std::vector<int> out(k);
        for (int i = 0; i < k; ++i) {
            int j = i + int(below(std::uint64_t(n - i)));
            std::swap(pool[i], pool[j]);
            out[i] = pool[i];
        }
        return out;
    }

    std::vector<int> permutation(int n) { return choose(n, n); }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Fans one top-level seed out into independent child streams keyed by a
// purpose string (FNV-1a over the tag mixed with the parent seed).
inline std::uint64_t derive_seed(std::uint64_t parent, const std::string& tag) {
    std::uint64_t h = 1469598103934665603ULL ^ parent;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    h ^= parent >> 32;
    h *= 1099511628211ULL;
    return h;
}

}  // namespace selfreg

#endif
