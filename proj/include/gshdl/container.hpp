#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gshdl {

/// On-disk layout shared by every artifact file:
///   "GSHD" | u16 version | { tag[4] | u64 length | payload | u32 crc32(tag, payload) }*
/// All integers little-endian.
inline constexpr std::uint16_t kFormatVersion = 1;

struct Chunk {
    std::array<char, 4> tag{};
    std::vector<std::uint8_t> payload;

    [[nodiscard]] std::string tag_string() const { return {tag.begin(), tag.end()}; }
};

[[nodiscard]] std::array<char, 4> make_tag(std::string_view tag);

[[nodiscard]] std::vector<std::uint8_t> encode_container(std::span<const Chunk> chunks);
/// Validates magic, version and every checksum before returning anything.
[[nodiscard]] std::vector<Chunk> decode_container(std::span<const std::uint8_t> bytes);

void write_container(const std::filesystem::path& path, std::span<const Chunk> chunks);
[[nodiscard]] std::vector<Chunk> read_container(const std::filesystem::path& path);

[[nodiscard]] std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

class ByteWriter {
  public:
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f32(float v);
    void f64(double v);
    void str(std::string_view s);
    void f64s(std::span<const double> v);
    void raw(std::span<const std::uint8_t> v) { bytes_.insert(bytes_.end(), v.begin(), v.end()); }

    [[nodiscard]] std::vector<std::uint8_t>& bytes() noexcept { return bytes_; }

  private:
    void put(std::uint64_t v, int n)
    {
        for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked reader; running past the end raises a format error.
class ByteReader {
  public:
    explicit ByteReader(std::span<const std::uint8_t> bytes, std::string context = {})
        : bytes_(bytes), context_(std::move(context))
    {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    float f32();
    double f64();
    std::string str();
    std::vector<double> f64s();
    /// Reads a u64 count and rejects counts that cannot fit in the remaining bytes.
    std::size_t count(std::size_t element_size);
    std::span<const std::uint8_t> raw(std::size_t n);

    [[nodiscard]] bool at_end() const noexcept { return pos_ == bytes_.size(); }
    [[nodiscard]] std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  private:
    std::uint64_t get(int n);
    void need(std::size_t n) const;

    std::span<const std::uint8_t> bytes_;
    std::string context_;
    std::size_t pos_ = 0;
};

} // namespace gshdl
