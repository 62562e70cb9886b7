#pragma once

// Byte-order helpers shared by the checkpoint, snapshot and IDX codecs.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace d2ssl::detail {

class ByteWriter {
public:
    void bytes(std::span<const char> b);
    void u8(std::uint8_t v);
    void u32_le(std::uint32_t v);
    void u64_le(std::uint64_t v);
    void f64_le(double v);
    void u32_be(std::uint32_t v);

    std::vector<char>& buffer() { return buf_; }

private:
    std::vector<char> buf_;
};

/// Bounds-checked reader; running past the end throws FormatError naming `context`.
class ByteReader {
public:
    ByteReader(std::span<const char> data, std::string context);

    std::span<const char> bytes(std::size_t n);
    std::uint8_t u8();
    std::uint32_t u32_le();
    std::uint64_t u64_le();
    double f64_le();
    std::uint32_t u32_be();

    std::size_t remaining() const { return data_.size() - pos_; }

private:
    void need(std::size_t n) const;

    std::span<const char> data_;
    std::size_t pos_ = 0;
    std::string context_;
};

std::vector<char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const char> bytes);

} // namespace d2ssl::detail
