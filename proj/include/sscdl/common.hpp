#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace sscdl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

// Error categories map to CLI exit codes: config 1, data 2, numeric 3.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// FNV-1a, 64 bit. Used for config fingerprints and seed derivation.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t seed = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t seed = 14695981039346656037ull) {
    return fnv1a64(s.data(), s.size(), seed);
}

// Mix a 64-bit value into a hash state. Feeds the value byte-wise so the
// result is independent of host endianness only through this fixed order.
inline std::uint64_t fnv1a64_mix(std::uint64_t h, std::uint64_t v) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    return fnv1a64(bytes, 8, h);
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// All randomness flows through this wrapper. mt19937_64 output is pinned by
// the standard; the distribution transforms below are hand-rolled so results
// are identical across standard libraries (std::uniform_* are not portable).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 random bits.
    double next_unit() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    // Unbiased integer in [0, n). Rejection sampling on the low bits.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ConfigError("Rng::below: n must be positive");
        const std::uint64_t threshold = (~n + 1) % n;  // (2^64 - n) mod n
        for (;;) {
            std::uint64_t x = eng_();
            if (x >= threshold) return x % n;
        }
    }

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct values from [0, n), in shuffled order.
    std::vector<int> sample_without_replacement(int n, int k) {
        if (k < 0 || k > n) throw ConfigError("sample_without_replacement: k out of range");
        std::vector<int> idx(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        shuffle(idx);
        idx.resize(static_cast<std::size_t>(k));
        return idx;
    }

private:
    std::mt19937_64 eng_;
};

// Deterministic seed derivation for named substreams.
inline std::uint64_t derive_seed(std::uint64_t base, const std::string& stream) {
    return fnv1a64(stream, fnv1a64_mix(14695981039346656037ull, base));
}

inline std::uint64_t derive_seed(std::uint64_t base, const std::string& stream,
                                 std::uint64_t a) {
    return fnv1a64_mix(derive_seed(base, stream), a);
}

inline std::uint64_t derive_seed(std::uint64_t base, const std::string& stream,
                                 std::uint64_t a, std::uint64_t b) {
    return fnv1a64_mix(derive_seed(base, stream, a), b);
}

}  // namespace sscdl
