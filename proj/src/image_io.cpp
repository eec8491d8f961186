#include "gshdl/image_io.hpp"

#include "gshdl/container.hpp"
#include "gshdl/error.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <string>

namespace gshdl {

namespace {

std::string lower_extension(const std::filesystem::path& path)
{
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext;
}

struct FileCloser {
    void operator()(std::FILE* f) const noexcept { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Decodes a PNG. With keep_palette, palette images return their indices.
Image8 read_png(const std::filesystem::path& path, bool keep_palette)
{
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw Error(ErrorKind::io, "cannot open " + path.string());
    png_byte sig[8];
    if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw Error(ErrorKind::format, path.string() + " is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(ErrorKind::io, "libpng initialisation failed");
    }
    Image8 out;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(ErrorKind::format, "corrupt PNG " + path.string());
    }
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (depth < 8) {
        if (color == PNG_COLOR_TYPE_PALETTE && keep_palette) {
            png_set_packing(png);
        } else if (color == PNG_COLOR_TYPE_GRAY) {
            png_set_expand_gray_1_2_4_to_8(png);
        }
    }
    if (color == PNG_COLOR_TYPE_PALETTE && !keep_palette) png_set_palette_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS) && !(color == PNG_COLOR_TYPE_PALETTE && keep_palette)) {
        png_set_tRNS_to_alpha(png);
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);
    out.width = png_get_image_width(png, info);
    out.height = png_get_image_height(png, info);
    out.channels = png_get_channels(png, info);
    if (out.channels != 1 && out.channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(ErrorKind::format, "unsupported PNG channel layout in " + path.string());
    }
    out.pixels.resize(out.height * out.width * out.channels);
    rows.resize(out.height);
    for (std::size_t y = 0; y < out.height; ++y) rows[y] = out.pixels.data() + y * out.width * out.channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void write_png(const std::filesystem::path& path, const Image8& image)
{
    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) throw Error(ErrorKind::io, "cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorKind::io, "libpng initialisation failed");
    }
    std::vector<png_bytep> rows(image.height);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorKind::io, "PNG encoding failed for " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < image.height; ++y) {
        rows[y] = const_cast<png_bytep>(image.pixels.data() + y * image.width * image.channels);
    }
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image8 read_pnm(const std::filesystem::path& path)
{
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&] {
        skip_space();
        std::size_t v = 0;
        bool any = false;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos++] - '0');
            any = true;
        }
        if (!any) throw Error(ErrorKind::format, "malformed PNM header in " + path.string());
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
        throw Error(ErrorKind::format, path.string() + " is not a binary PGM/PPM file");
    }
    pos = 2;
    Image8 out;
    out.channels = bytes[1] == '6' ? 3 : 1;
    out.width = number();
    out.height = number();
    const std::size_t maxval = number();
    if (maxval != 255) throw Error(ErrorKind::format, "only 8-bit PNM files are supported");
    ++pos; // single whitespace after maxval
    const std::size_t n = out.width * out.height * out.channels;
    if (out.width == 0 || out.height == 0 || pos + n > bytes.size()) {
        throw Error(ErrorKind::format, "truncated PNM file " + path.string());
    }
    out.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                      bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    return out;
}

void write_pnm(const std::filesystem::path& path, const Image8& image)
{
    const std::string header = (image.channels == 3 ? "P6\n" : "P5\n") + std::to_string(image.width) + " " +
                               std::to_string(image.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.insert(bytes.end(), image.pixels.begin(), image.pixels.end());
    write_file_bytes(path, bytes);
}

bool is_pnm(const std::string& ext) { return ext == ".ppm" || ext == ".pgm" || ext == ".pnm"; }

} // namespace

Image8 read_image8(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path)) throw Error(ErrorKind::io, "missing file " + path.string());
    return is_pnm(lower_extension(path)) ? read_pnm(path) : read_png(path, false);
}

void write_image8(const std::filesystem::path& path, const Image8& image)
{
    if (image.channels != 1 && image.channels != 3) throw Error(ErrorKind::dimension, "images have 1 or 3 channels");
    if (image.pixels.size() != image.height * image.width * image.channels) {
        throw Error(ErrorKind::dimension, "pixel buffer does not match the image size");
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (is_pnm(lower_extension(path))) {
        write_pnm(path, image);
    } else {
        write_png(path, image);
    }
}

Grid2D to_grid(const Image8& image)
{
    Grid2D g(image.height, image.width, image.channels);
    for (std::size_t c = 0; c < image.channels; ++c) {
        for (std::size_t i = 0; i < image.height * image.width; ++i) {
            g.plane(c)[i] = image.pixels[i * image.channels + c] / 255.0;
        }
    }
    return g;
}

Image8 to_image8(const Grid2D& grid)
{
    if (grid.channels() != 1 && grid.channels() != 3) throw Error(ErrorKind::dimension, "images have 1 or 3 channels");
    Image8 out{grid.height(), grid.width(), grid.channels(), {}};
    out.pixels.resize(grid.size());
    for (std::size_t c = 0; c < grid.channels(); ++c) {
        for (std::size_t i = 0; i < grid.plane_size(); ++i) {
            const double v = std::clamp(grid.plane(c)[i], 0.0, 1.0);
            out.pixels[i * grid.channels() + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    }
    return out;
}

std::vector<int> read_mask_codes(const std::filesystem::path& path, std::size_t& height, std::size_t& width)
{
    if (!std::filesystem::exists(path)) throw Error(ErrorKind::io, "missing file " + path.string());
    const Image8 img = is_pnm(lower_extension(path)) ? read_pnm(path) : read_png(path, true);
    if (img.channels != 1) throw Error(ErrorKind::format, "mask " + path.string() + " is not single-channel");
    height = img.height;
    width = img.width;
    return {img.pixels.begin(), img.pixels.end()};
}

void write_mask(const std::filesystem::path& path, const LabelGrid& labels)
{
    Image8 img{labels.height, labels.width, 1, {}};
    img.pixels.reserve(labels.labels.size());
    for (int l : labels.labels) {
        if (l > 254) throw Error(ErrorKind::data, "label codes above 254 do not fit an 8-bit mask");
        img.pixels.push_back(l < 0 ? 255 : static_cast<std::uint8_t>(l));
    }
    write_image8(path, img);
}

} // namespace gshdl
