#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace flame {

namespace detail {

// splitmix64 finalizer, used to derive independent seeds from a base seed
// plus a purpose tag so that streams never alias.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace detail

// Deterministic random stream. All randomness in the library flows through
// this class; uniforms are built from raw bits so results do not depend on
// the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

    // Uniform integer in [0, n). n must be positive.
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    // Fisher-Yates shuffle; self-contained so the permutation is identical
    // across standard library implementations.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
};

// Derives the seed of a named sub-stream. Extra integer coordinates keep
// per-epoch and per-step streams disjoint.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose) {
    std::uint64_t h = detail::mix64(base ^ 0x243f6a8885a308d3ull);
    for (unsigned char c : purpose) h = detail::mix64(h ^ c);
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose,
                                 std::uint64_t a) {
    return detail::mix64(derive_seed(base, purpose) ^ detail::mix64(a));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose,
                                 std::uint64_t a, std::uint64_t b) {
    return detail::mix64(derive_seed(base, purpose, a) ^ detail::mix64(b + 0x1d8af066ull));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose,
                                 std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return detail::mix64(derive_seed(base, purpose, a, b) ^ detail::mix64(c + 0x5851f42dull));
}

}  // namespace flame
