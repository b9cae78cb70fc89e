#pragma once

// Little-endian binary encoding helpers for the EXTK/EXPK/EXWT/EXCE formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <type_traits>

#include "exact/error.hpp"

namespace exact::binio {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T byteswap_if_needed(T value) {
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        std::array<unsigned char, sizeof(T)> bytes;
        std::memcpy(bytes.data(), &value, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
        std::memcpy(&value, bytes.data(), sizeof(T));
    }
    return value;
}

/// Append-only little-endian byte sink.
class Writer {
public:
    template <typename T>
        requires std::is_arithmetic_v<T>
    void put(T value) {
        value = byteswap_if_needed(value);
        const auto* p = reinterpret_cast<const char*>(&value);
        buffer_.append(p, sizeof(T));
    }
    void put_magic(std::string_view magic) { buffer_.append(magic); }
    void put_bytes(std::string_view bytes) { buffer_.append(bytes); }

    const std::string& bytes() const { return buffer_; }
    std::string take() { return std::move(buffer_); }

private:
    std::string buffer_;
};

/// Bounds-checked little-endian reader over an in-memory buffer.
class Reader {
public:
    Reader(std::string_view data, std::string label) : data_(data), label_(std::move(label)) {}

    template <typename T>
        requires std::is_arithmetic_v<T>
    T get() {
        require(sizeof(T));
        T value;
        std::memcpy(&value, data_.data() + offset_, sizeof(T));
        offset_ += sizeof(T);
        return byteswap_if_needed(value);
    }

    std::string_view get_bytes(std::size_t n) {
        require(n);
        auto out = data_.substr(offset_, n);
        offset_ += n;
        return out;
    }

    void expect_magic(std::string_view magic) {
        if (remaining() < magic.size() || data_.substr(offset_, magic.size()) != magic) {
            fail(ErrorCode::format_error, label_ + ": bad magic, expected '" + std::string(magic) + "'");
        }
        offset_ += magic.size();
    }

    void expect_version(std::uint16_t expected) {
        const auto v = get<std::uint16_t>();
        if (v != expected) {
            fail(ErrorCode::format_error,
                 label_ + ": unsupported version " + std::to_string(v) + " (expected " + std::to_string(expected) + ")");
        }
    }

    std::size_t offset() const { return offset_; }
    std::size_t remaining() const { return data_.size() - offset_; }
    bool at_end() const { return offset_ == data_.size(); }
    const std::string& label() const { return label_; }

    void expect_end() const {
        if (!at_end()) {
            fail(ErrorCode::format_error,
                 label_ + ": " + std::to_string(remaining()) + " trailing bytes at offset " + std::to_string(offset_));
        }
    }

private:
    void require(std::size_t n) const {
        if (remaining() < n) {
            fail(ErrorCode::format_error,
                 label_ + ": truncated at offset " + std::to_string(offset_) + " (need " + std::to_string(n) + " bytes)");
        }
    }

    std::string_view data_;
    std::size_t offset_ = 0;
    std::string label_;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::io_error, "cannot open '" + path.string() + "' for reading");
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io_error, "cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::io_error, "write failed for '" + path.string() + "'");
}

inline bool starts_with_magic(std::string_view bytes, std::string_view magic) {
    return bytes.substr(0, magic.size()) == magic;
}

}  // namespace exact::binio
