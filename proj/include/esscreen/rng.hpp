// Copyright 2026 The esscreen Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <limits>

#include <boost/random/chi_squared_distribution.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>

namespace esscreen {

inline std::uint64_t splitmix64(std::uint64_t& x)
{
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// xoshiro256** by Blackman and Vigna.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed)
    {
        std::uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()()
    {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    double normal() { return normal_(*this); }
    double uniform() { return uniform_(*this); }
    double chi_squared(double dof)
    {
        return boost::random::chi_squared_distribution<double>(dof)(*this);
    }

    bool operator==(const Rng& o) const { return s_ == o.s_; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<std::uint64_t, 4> s_{};
    boost::random::normal_distribution<double> normal_{};
    boost::random::uniform_01<double> uniform_{};
};

// Sub-stream keyed by a root seed and a path of counters, independent of
// the order in which streams are created.
inline Rng derive_stream(std::uint64_t root, std::initializer_list<std::uint64_t> path)
{
    std::uint64_t h = root;
    std::uint64_t x = splitmix64(h);
    for (std::uint64_t p : path) {
        x ^= p + 0x632be59bd9b4e019ULL;
        x = splitmix64(x);
    }
    return Rng(x);
}

namespace stream {
constexpr std::uint64_t world = 1;
constexpr std::uint64_t uniform = 10;
constexpr std::uint64_t heuristic = 11;
constexpr std::uint64_t deterministic = 12;
constexpr std::uint64_t adaptive = 13;
constexpr std::uint64_t training = 20;
} // namespace stream

} // namespace esscreen
