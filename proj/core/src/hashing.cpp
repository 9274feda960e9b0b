#include "vft/hashing.hpp"

#include <openssl/evp.h>

#include "vft/errors.hpp"

namespace vft {

const char* to_string(VerifyFault f) {
    switch (f) {
        case VerifyFault::None: return "ok";
        case VerifyFault::OutOfPolicyBatch: return "OutOfPolicyBatch";
        case VerifyFault::ManifestMismatch: return "ManifestMismatch";
        case VerifyFault::ChainBreak: return "ChainBreak";
        case VerifyFault::ConstraintViolation: return "ConstraintViolation";
        case VerifyFault::BudgetExceeded: return "BudgetExceeded";
        case VerifyFault::QuotaViolation: return "QuotaViolation";
        case VerifyFault::BoundaryMismatch: return "BoundaryMismatch";
    }
    return "unknown";
}

static EVP_MD_CTX* new_sha256_ctx() {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw IoError("sha256: context init failed");
    }
    return ctx;
}

Hasher::Hasher() : ctx_(new_sha256_ctx()) {}

Hasher::Hasher(Tag tag) : ctx_(new_sha256_ctx()) { update_u8(static_cast<uint8_t>(tag)); }

Hasher::~Hasher() {
    if (ctx_) EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_));
}

Hasher& Hasher::update(std::span<const uint8_t> data) {
    if (EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data.data(), data.size()) != 1)
        throw IoError("sha256: update failed");
    return *this;
}

Hasher& Hasher::update_u8(uint8_t v) {
    return update(std::span<const uint8_t>(&v, 1));
}

Hasher& Hasher::update_u64(uint64_t v) {
    uint8_t le[8];
    for (int i = 0; i < 8; ++i) le[i] = static_cast<uint8_t>(v >> (8 * i));
    return update(std::span<const uint8_t>(le, 8));
}

Hasher& Hasher::update_str(std::string_view s) {
    uint8_t le[4];
    uint32_t n = static_cast<uint32_t>(s.size());
    for (int i = 0; i < 4; ++i) le[i] = static_cast<uint8_t>(n >> (8 * i));
    update(std::span<const uint8_t>(le, 4));
    return update(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(s.data()), s.size()));
}

Digest Hasher::finish() {
    Digest out{};
    unsigned int n = 0;
    if (EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), out.data(), &n) != 1 || n != out.size())
        throw IoError("sha256: final failed");
    return out;
}

Digest sha256(std::span<const uint8_t> data) {
    Hasher h;
    h.update(data);
    return h.finish();
}

std::string hex(const Digest& d) {
    return to_hex(std::span<const uint8_t>(d.data(), d.size()));
}

Digest digest_from_hex(std::string_view h) {
    Bytes b = from_hex(h);
    if (b.size() != 32) throw SchemaError("digest hex must decode to 32 bytes");
    Digest d{};
    std::copy(b.begin(), b.end(), d.begin());
    return d;
}

} // namespace vft
