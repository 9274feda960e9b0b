#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vft/errors.hpp"

namespace vft {

using Bytes = std::vector<uint8_t>;

// Canonical serialization helpers. Every committed structure is encoded with
// these primitives: little-endian fixed-width integers and length-prefixed
// byte strings, so that encodings are unambiguous and prefix-free per field.
class ByteWriter {
public:
    void u8(uint8_t v) { out_.push_back(v); }
    void u16(uint16_t v);
    void u32(uint32_t v);
    void u64(uint64_t v);
    void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
    void raw(std::span<const uint8_t> bytes);
    void raw(const void* data, size_t n);
    // u32 length prefix, then the bytes.
    void blob(std::span<const uint8_t> bytes);
    void str(std::string_view s);

    const Bytes& bytes() const { return out_; }
    Bytes take() { return std::move(out_); }

private:
    Bytes out_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const uint8_t> data) : data_(data) {}

    uint8_t u8();
    uint16_t u16();
    uint32_t u32();
    uint64_t u64();
    int64_t i64() { return static_cast<int64_t>(u64()); }
    void raw(void* dst, size_t n);
    Bytes blob();
    std::string str();

    size_t remaining() const { return data_.size() - pos_; }
    bool done() const { return pos_ == data_.size(); }
    void expect_done(const char* what) const;

private:
    void need(size_t n) const;
    std::span<const uint8_t> data_;
    size_t pos_ = 0;
};

std::string to_hex(std::span<const uint8_t> bytes);
Bytes from_hex(std::string_view hex);

} // namespace vft
