#pragma once

// Seed derivation. Every environment episode in a run draws its seed from
// the run's base seed plus a purpose tag and coordinates, so attempts,
// checkpoints and evaluations never share a stream and reruns are exact.

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace forge::seeds {

/// splitmix64 finalizer.
constexpr std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t derive(std::uint64_t base, std::string_view tag, std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = mix(base ^ fnv1a(tag));
    for (auto p : parts) h = mix(h ^ mix(p));
    return h;
}

constexpr std::uint64_t attempt_seed(std::uint64_t base, int stage, int instance, int attempt) {
    return derive(base, "attempt", {std::uint64_t(stage), std::uint64_t(instance), std::uint64_t(attempt)});
}

constexpr std::uint64_t checkpoint_seed(std::uint64_t base, int stage, int instance) {
    return derive(base, "ckpt", {std::uint64_t(stage), std::uint64_t(instance)});
}

constexpr std::uint64_t eval_seed(std::uint64_t base, int instance, int episode) {
    return derive(base, "eval", {std::uint64_t(instance), std::uint64_t(episode)});
}

}  // namespace forge::seeds
