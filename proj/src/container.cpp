#include "gshdl/container.hpp"

#include "gshdl/error.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace gshdl {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'G', 'S', 'H', 'D'};

std::uint32_t chunk_crc(const std::array<char, 4>& tag, std::span<const std::uint8_t> payload)
{
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(tag.data()), 4);
    // zlib takes a uInt length; feed large payloads piecewise.
    std::size_t off = 0;
    while (off < payload.size()) {
        const std::size_t n = std::min<std::size_t>(payload.size() - off, 1u << 30);
        crc = crc32(crc, payload.data() + off, static_cast<uInt>(n));
        off += n;
    }
    return static_cast<std::uint32_t>(crc);
}

} // namespace

std::array<char, 4> make_tag(std::string_view tag)
{
    if (tag.size() != 4) throw Error(ErrorKind::format, "chunk tags are exactly four characters");
    return {tag[0], tag[1], tag[2], tag[3]};
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::str(std::string_view s)
{
    u64(s.size());
    bytes_.insert(bytes_.end(), s.begin(), s.end());
}

void ByteWriter::f64s(std::span<const double> v)
{
    u64(v.size());
    for (double x : v) f64(x);
}

void ByteReader::need(std::size_t n) const
{
    if (n > bytes_.size() - pos_) {
        throw Error(ErrorKind::format, "truncated data" + (context_.empty() ? std::string() : " in " + context_));
    }
}

std::uint64_t ByteReader::get(int n)
{
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::size_t ByteReader::count(std::size_t element_size)
{
    const std::uint64_t n = u64();
    if (element_size > 0 && n > remaining() / element_size) {
        throw Error(ErrorKind::format, "element count exceeds the data" + (context_.empty() ? std::string() : " in " + context_));
    }
    return static_cast<std::size_t>(n);
}

std::string ByteReader::str()
{
    const std::size_t n = count(1);
    const auto bytes = raw(n);
    return {bytes.begin(), bytes.end()};
}

std::vector<double> ByteReader::f64s()
{
    const std::size_t n = count(8);
    std::vector<double> out(n);
    for (double& x : out) x = f64();
    return out;
}

std::span<const std::uint8_t> ByteReader::raw(std::size_t n)
{
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
}

std::vector<std::uint8_t> encode_container(std::span<const Chunk> chunks)
{
    ByteWriter w;
    w.raw(kMagic);
    w.u16(kFormatVersion);
    for (const Chunk& c : chunks) {
        w.raw({reinterpret_cast<const std::uint8_t*>(c.tag.data()), 4});
        w.u64(c.payload.size());
        w.raw(c.payload);
        w.u32(chunk_crc(c.tag, c.payload));
    }
    return std::move(w.bytes());
}

std::vector<Chunk> decode_container(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 6 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
        throw Error(ErrorKind::format, "not a GSHD file (bad magic)");
    }
    ByteReader r(bytes.subspan(4), "container header");
    const std::uint16_t version = r.u16();
    if (version != kFormatVersion) {
        throw Error(ErrorKind::version, "unsupported format version " + std::to_string(version) + " (this build reads " +
                                            std::to_string(kFormatVersion) + ")");
    }
    std::vector<Chunk> chunks;
    while (!r.at_end()) {
        Chunk c;
        const auto tag = r.raw(4);
        std::memcpy(c.tag.data(), tag.data(), 4);
        const std::size_t length = r.count(1);
        const auto payload = r.raw(length);
        const std::uint32_t stored = r.u32();
        if (stored != chunk_crc(c.tag, payload)) {
            throw Error(ErrorKind::checksum, "CRC mismatch in chunk " + c.tag_string());
        }
        c.payload.assign(payload.begin(), payload.end());
        chunks.push_back(std::move(c));
    }
    return chunks;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::io, "short write to " + path.string());
}

void write_container(const std::filesystem::path& path, std::span<const Chunk> chunks)
{
    write_file_bytes(path, encode_container(chunks));
}

std::vector<Chunk> read_container(const std::filesystem::path& path)
{
    return decode_container(read_file_bytes(path));
}

} // namespace gshdl
