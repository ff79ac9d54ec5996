#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace elcbert {

// Counter-based deterministic generator: the i-th output is the SplitMix64
// finalizer applied to key + i * golden ratio. All randomness in the project
// flows from one of these. std:: distributions are never used because their
// output is implementation-defined; the integer stream here is identical on
// every platform.
//
// Streams are split by label or index, so independent consumers (parameter
// init, per-step masking, per-epoch shuffles) never share a counter.
class Rng {
  public:
    explicit Rng(std::uint64_t key) : key_(key) {}

    static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

    static constexpr std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t next_u64() {
        counter_ += 1;
        return mix(key_ + counter_ * kGolden);
    }

    // Child stream, independent of this generator's counter position.
    Rng split(std::string_view label) const {
        std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
        for (char c : label) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return Rng(mix(key_ ^ mix(h)));
    }

    Rng split(std::uint64_t stream) const { return Rng(mix(key_ ^ mix(stream + 1))); }

    // Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Unbiased uniform in [0, n), n >= 1.
    std::uint64_t next_below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next_u64();
        while (v >= limit) {
            v = next_u64();
        }
        return v % n;
    }

    // Standard normal via Box-Muller; the second variate is cached.
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    std::uint64_t key() const { return key_; }

  private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Fisher-Yates driven by the counter stream.
template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(items[i - 1], items[j]);
    }
}

}  // namespace elcbert
