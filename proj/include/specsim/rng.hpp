#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <string_view>
#include <vector>

namespace specsim {

namespace detail {

// SplitMix64, used only to turn (seed, stream_id) into engine state.
inline std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix_label(std::uint64_t state, std::uint64_t label) {
    std::uint64_t x = state ^ (0x9e3779b97f4a7c15ULL + label);
    splitmix64(x);
    return x;
}

} // namespace detail

/// Deterministic random stream. Identical (seed, stream_id, call sequence)
/// yields identical draws on every platform: the engine is std::mt19937_64
/// (state sequence fixed by the standard) and all real-valued draws are
/// derived from raw 64-bit words here, never through std::*_distribution.
class RngStream {
public:
    RngStream() : RngStream(0, 0) {}
    RngStream(std::uint64_t seed, std::uint64_t stream_id)
        : seed_(seed), stream_id_(stream_id) {
        std::uint64_t x = seed ^ detail::mix_label(0x5bf03635d0d0183dULL, stream_id);
        engine_.seed(detail::splitmix64(x));
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }

    /// Derive an independent substream; does not disturb this stream's state.
    RngStream fork(std::uint64_t label) const {
        return RngStream(seed_, detail::mix_label(stream_id_ + 0x9e3779b97f4a7c15ULL, label));
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n). n must be >= 1.
    std::uint64_t uniform_int(std::uint64_t n) {
        return next_u64() % n;
    }

    /// Standard normal via Box-Muller (two uniform draws per call).
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(6.283185307179586477 * u2);
    }

    /// Flat Dirichlet(1,...,1) draw over `dim` components.
    std::vector<double> dirichlet_flat(std::size_t dim) {
        std::vector<double> out(dim);
        double sum = 0.0;
        for (auto& v : out) {
            v = -std::log1p(-uniform01()); // Exp(1)
            sum += v;
        }
        for (auto& v : out) v /= sum;
        return out;
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::mt19937_64 engine_;
};

} // namespace specsim
