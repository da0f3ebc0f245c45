#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace profed {

using Rng = std::mt19937_64;

// Derives an independent stream from a tuple of keys (master seed, client id,
// round, purpose tag, ...). Equal key tuples always give equal streams.
inline Rng make_rng(std::initializer_list<std::uint64_t> keys)
{
    std::vector<std::uint32_t> words;
    words.reserve(keys.size() * 2);
    for (std::uint64_t k : keys) {
        words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
        words.push_back(static_cast<std::uint32_t>(k >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

// Stream purpose tags, so that two uses of the same (seed, client, round) never collide.
namespace stream {
inline constexpr std::uint64_t init = 0x11;
inline constexpr std::uint64_t shuffle = 0x22;
inline constexpr std::uint64_t dropout = 0x33;
inline constexpr std::uint64_t mc_dropout = 0x44;
inline constexpr std::uint64_t phantom = 0x55;
inline constexpr std::uint64_t noise = 0x66;
inline constexpr std::uint64_t projection = 0x77;
} // namespace stream

} // namespace profed
