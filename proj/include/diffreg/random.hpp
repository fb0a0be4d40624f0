#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace diffreg {

using Rng = std::mt19937_64;

/// Derive an independent generator from a seed and a list of stream keys
/// (epoch, query id, ...). Identical inputs always give identical streams.
inline Rng make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys = {}) {
    std::vector<std::uint32_t> words;
    words.reserve(2 + 2 * keys.size());
    auto push = [&](std::uint64_t v) {
        words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
        words.push_back(static_cast<std::uint32_t>(v >> 32));
    };
    push(seed);
    for (auto k : keys) {
        push(k);
    }
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

/// 64-bit FNV-1a.
class Fnv1a {
public:
    void update(const void* data, std::size_t size) {
        auto bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < size; ++i) {
            state_ ^= bytes[i];
            state_ *= 0x100000001b3ull;
        }
    }
    void update(std::string_view text) { update(text.data(), text.size()); }
    std::uint64_t digest() const { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ull;
};

inline std::uint64_t hash_features(std::span<const double> features) {
    Fnv1a h;
    h.update(features.data(), features.size_bytes());
    return h.digest();
}

} // namespace diffreg
