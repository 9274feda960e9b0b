#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "vft/bytes.hpp"

namespace vft {

using Digest = std::array<uint8_t, 32>;

// One-byte domain separation tags. Every hash in the protocol is prefixed
// with exactly one of these so digests from different roles can never collide
// structurally.
enum class Tag : uint8_t {
    Leaf = 0x00,       // dataset example leaf
    Node = 0x01,       // Merkle internal node
    Counter = 0x02,    // salted per-bin counter leaf
    StepChain = 0x03,  // step hash-chain link
    Fold = 0x04,       // transcript aggregation node
    BatchIndex = 0x05, // public sampler index derivation
    BatchSalt = 0x06,  // salted per-example batch commitment
    Tensor = 0x07,     // single tensor digest
    State = 0x08,      // model + optimizer state digest
    Manifest = 0x09,   // policy manifest digest
    Activation = 0x0a, // per-block activation checksum
    Grads = 0x0b,      // gradient set digest
    Audit = 0x0c,      // audit subset derivation
    BatchSet = 0x0d,   // digest of a whole batch attestation
    Stream = 0x0e,     // generic deterministic byte stream (rng, keystream)
    Backbone = 0x0f,   // frozen backbone digest
    Transcript = 0x10, // serialized step transcript digest
    Table = 0x11,      // lookup table entries digest
};

Digest sha256(std::span<const uint8_t> data);

// Incremental SHA-256 with an optional leading domain tag.
class Hasher {
public:
    Hasher();
    explicit Hasher(Tag tag);
    Hasher(const Hasher&) = delete;
    Hasher& operator=(const Hasher&) = delete;
    ~Hasher();

    Hasher& update(std::span<const uint8_t> data);
    Hasher& update(const Digest& d) { return update(std::span<const uint8_t>(d.data(), d.size())); }
    Hasher& update_u8(uint8_t v);
    Hasher& update_u64(uint64_t v); // little-endian
    Hasher& update_i64(int64_t v) { return update_u64(static_cast<uint64_t>(v)); }
    Hasher& update_str(std::string_view s); // u32 length prefix, then bytes

    Digest finish();

private:
    void* ctx_;
};

std::string hex(const Digest& d);
Digest digest_from_hex(std::string_view h);

} // namespace vft
