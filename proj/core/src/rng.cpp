#include "vft/rng.hpp"

#include <cstring>

#include "vft/errors.hpp"

namespace vft {

HashRng::HashRng(Tag tag, const Digest& seed, std::string_view label)
    : tag_(tag), seed_(seed), label_(label) {}

void HashRng::refill() {
    Hasher h(tag_);
    h.update(seed_);
    h.update_str(label_);
    h.update_u64(counter_++);
    block_ = h.finish();
    have_ = block_.size();
}

void HashRng::fill(uint8_t* dst, size_t n) {
    while (n > 0) {
        if (have_ == 0) refill();
        size_t take = n < have_ ? n : have_;
        std::memcpy(dst, block_.data() + (block_.size() - have_), take);
        dst += take;
        have_ -= take;
        n -= take;
    }
}

uint64_t HashRng::next_u64() {
    uint8_t b[8];
    fill(b, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

uint64_t HashRng::uniform_below(uint64_t n) {
    if (n == 0) throw IndexOutOfRange("uniform_below: empty range");
    // Largest multiple of n that fits in 64 bits; values at or above it would
    // bias the low residues, so they are rejected.
    uint64_t bound = n * (UINT64_MAX / n);
    for (;;) {
        uint64_t u = next_u64();
        if (u < bound) return u % n;
    }
}

int64_t HashRng::uniform_signed(int64_t m) {
    if (m < 0) throw IndexOutOfRange("uniform_signed: negative magnitude");
    uint64_t span = 2 * static_cast<uint64_t>(m) + 1;
    return static_cast<int64_t>(uniform_below(span)) - m;
}

double HashRng::uniform_real() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

} // namespace vft
