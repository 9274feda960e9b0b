#pragma once

#include <cstdint>
#include <string_view>

#include "vft/hashing.hpp"

namespace vft {

// Deterministic RNG built from a hashed counter stream:
//   block_i = H(tag || seed || label || LE64(i))
// Used wherever reproducible pseudo-randomness is needed outside the public
// sampler derivation (model init, salts, audit subsets, simulator draws).
// Not a committed arithmetic path, but bit-stable given the same seed.
class HashRng {
public:
    HashRng(Tag tag, const Digest& seed, std::string_view label);

    uint64_t next_u64();
    // Unbiased uniform draw in [0, n) via rejection sampling.
    uint64_t uniform_below(uint64_t n);
    // Uniform signed draw in [-m, m].
    int64_t uniform_signed(int64_t m);
    // Uniform double in [0, 1) with 53 random bits. Simulator use only.
    double uniform_real();
    void fill(uint8_t* dst, size_t n);

private:
    void refill();
    Tag tag_;
    Digest seed_;
    std::string label_;
    uint64_t counter_ = 0;
    Digest block_{};
    size_t have_ = 0; // unread bytes remaining in block_
};

} // namespace vft
