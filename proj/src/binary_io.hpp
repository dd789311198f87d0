#pragma once

// Little-endian byte buffers shared by the dump and checkpoint formats.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace dgan::detail {

class ByteWriter {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        auto raw = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(v);
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
        bytes.insert(bytes.end(), raw.begin(), raw.end());
    }
    void put_bytes(std::span<const std::uint8_t> b) { bytes.insert(bytes.end(), b.begin(), b.end()); }
    void put_string(const std::string& s) {
        put(static_cast<std::uint32_t>(s.size()));
        put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    }

    std::vector<std::uint8_t> bytes;
};

// OnShort is called with a description of the field that ran past the end
// and must throw.
template <typename OnShort>
class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> bytes, OnShort on_short) : bytes_(bytes), on_short_(on_short) {}

    template <typename T>
    T get(const std::string& what) {
        need(sizeof(T), what);
        std::array<std::uint8_t, sizeof(T)> raw{};
        std::memcpy(raw.data(), bytes_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
        pos_ += sizeof(T);
        return std::bit_cast<T>(raw);
    }
    std::span<const std::uint8_t> take(std::size_t n, const std::string& what) {
        need(n, what);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::string get_string(const std::string& what) {
        const auto n = get<std::uint32_t>(what);
        const auto raw = take(n, what);
        return {raw.begin(), raw.end()};
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n, const std::string& what) {
        if (bytes_.size() - pos_ < n) on_short_(what);
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
    OnShort on_short_;
};

} // namespace dgan::detail
