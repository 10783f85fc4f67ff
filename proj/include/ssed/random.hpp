#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace ssed {

using Rng = std::mt19937_64;

/// Independent generator stream keyed by a seed plus any number of
/// discriminators (sample index, epoch, batch, ...). std::seed_seq is fully
/// specified by the standard, so the streams are portable.
inline Rng make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys = {})
{
    std::vector<std::uint32_t> words;
    words.reserve(2 + 2 * keys.size());
    auto push = [&](std::uint64_t v) {
        words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
        words.push_back(static_cast<std::uint32_t>(v >> 32));
    };
    push(seed);
    for (auto k : keys) push(k);
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

inline double uniform(Rng& rng, double lo, double hi)
{
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double sd = 1.0)
{
    return std::normal_distribution<double>(mean, sd)(rng);
}

}  // namespace ssed
