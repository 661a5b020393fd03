// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

namespace upl {

/// Malformed or unreadable file contents.
class FormatError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Little-endian serializer.
class ByteWriter {
   public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    std::size_t size() const { return buf_.size(); }
    std::vector<std::uint8_t>& buffer() { return buf_; }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

   private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> buf_;
};

/// Little-endian deserializer; throws FormatError on truncation.
class ByteReader {
   public:
    ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
    explicit ByteReader(const std::vector<std::uint8_t>& v) : ByteReader(v.data(), v.size()) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    float f32() { return std::bit_cast<float>(u32()); }
    void bytes(void* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, p_ + pos_, n);
        pos_ += n;
    }
    std::string str(std::size_t max_len = 1 << 16) {
        const std::uint32_t len = u32();
        if (len > max_len) throw FormatError("string length " + std::to_string(len) + " exceeds limit");
        std::string s(len, '\0');
        bytes(s.data(), len);
        return s;
    }
    void floats(float* dst, std::size_t n) {
        need(n * 4);
        for (std::size_t i = 0; i < n; ++i) dst[i] = f32();
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return n_ - pos_; }

   private:
    void need(std::size_t k) const {
        if (k > n_ - pos_) throw FormatError("truncated stream: need " + std::to_string(k) + " bytes at offset " +
                                             std::to_string(pos_) + ", have " + std::to_string(n_ - pos_));
    }
    std::uint64_t get(int k) {
        need(static_cast<std::size_t>(k));
        std::uint64_t v = 0;
        for (int i = 0; i < k; ++i) v |= static_cast<std::uint64_t>(p_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        pos_ += static_cast<std::size_t>(k);
        return v;
    }
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
    uLong c = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths
    while (n > 0) {
        const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        c = crc32(c, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(c);
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace upl
