#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

namespace diffattn {

class ImageError : public std::runtime_error {
public:
    explicit ImageError(const std::string& msg) : std::runtime_error(msg) {}
};

// RGB image with planar float32 channels in [0, 1].
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> data;  // 3 planes of width*height, R then G then B

    Image() = default;
    Image(std::size_t w, std::size_t h, float fill = 0.0f)
        : width(w), height(h), data(3 * w * h, fill) {}

    float& at(std::size_t c, std::size_t y, std::size_t x) {
        return data[c * width * height + y * width + x];
    }
    float at(std::size_t c, std::size_t y, std::size_t x) const {
        return data[c * width * height + y * width + x];
    }
};

namespace img {

// Raw planar float format: two little-endian u32 (width, height), then three
// float32 planes.
inline Image load_f32(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageError("cannot open image " + path.string());
    std::uint32_t w = 0, h = 0;
    in.read(reinterpret_cast<char*>(&w), 4);
    in.read(reinterpret_cast<char*>(&h), 4);
    if (!in || w == 0 || h == 0 || w > 1 << 16 || h > 1 << 16)
        throw ImageError("bad .f32 header in " + path.string());
    Image im(w, h);
    in.read(reinterpret_cast<char*>(im.data.data()),
            static_cast<std::streamsize>(im.data.size() * sizeof(float)));
    if (!in) throw ImageError("truncated .f32 data in " + path.string());
    return im;
}

inline void save_f32(const std::filesystem::path& path, const Image& im) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ImageError("cannot write image " + path.string());
    const std::uint32_t w = static_cast<std::uint32_t>(im.width);
    const std::uint32_t h = static_cast<std::uint32_t>(im.height);
    out.write(reinterpret_cast<const char*>(&w), 4);
    out.write(reinterpret_cast<const char*>(&h), 4);
    out.write(reinterpret_cast<const char*>(im.data.data()),
              static_cast<std::streamsize>(im.data.size() * sizeof(float)));
}

inline Image load_png(const std::filesystem::path& path) {
    FILE* fp = std::fopen(path.string().c_str(), "rb");
    if (!fp) throw ImageError("cannot open image " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw ImageError("failed to decode PNG " + path.string());
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    const std::size_t w = png_get_image_width(png, info);
    const std::size_t h = png_get_image_height(png, info);
    // Normalize everything (grayscale, palette, 16-bit, alpha) to 8-bit RGB.
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    Image im(w, h);
    for (std::size_t y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                im.at(c, y, x) = row[x * 3 + c] / 255.0f;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return im;
}

inline Image load(const std::filesystem::path& path) {
    if (path.extension() == ".f32") return load_f32(path);
    if (path.extension() == ".png") return load_png(path);
    throw ImageError("unsupported image format " + path.string());
}

// Bilinear resize; an exact-size input comes back bit-equal.
inline Image resize(const Image& src, std::size_t w, std::size_t h) {
    if (src.width == w && src.height == h) return src;
    Image dst(w, h);
    const float sx = static_cast<float>(src.width) / static_cast<float>(w);
    const float sy = static_cast<float>(src.height) / static_cast<float>(h);
    for (std::size_t y = 0; y < h; ++y) {
        const float fy = (static_cast<float>(y) + 0.5f) * sy - 0.5f;
        const float cy = std::clamp(fy, 0.0f, static_cast<float>(src.height - 1));
        const std::size_t y0 = static_cast<std::size_t>(cy);
        const std::size_t y1 = std::min(y0 + 1, src.height - 1);
        const float wy = cy - static_cast<float>(y0);
        for (std::size_t x = 0; x < w; ++x) {
            const float fx = (static_cast<float>(x) + 0.5f) * sx - 0.5f;
            const float cx = std::clamp(fx, 0.0f, static_cast<float>(src.width - 1));
            const std::size_t x0 = static_cast<std::size_t>(cx);
            const std::size_t x1 = std::min(x0 + 1, src.width - 1);
            const float wx = cx - static_cast<float>(x0);
            for (std::size_t c = 0; c < 3; ++c) {
                const float top = src.at(c, y0, x0) * (1 - wx) + src.at(c, y0, x1) * wx;
                const float bot = src.at(c, y1, x0) * (1 - wx) + src.at(c, y1, x1) * wx;
                dst.at(c, y, x) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return dst;
}

inline Image crop(const Image& src, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
    if (x0 + w > src.width || y0 + h > src.height)
        throw ImageError("crop out of bounds");
    Image dst(w, h);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                dst.at(c, y, x) = src.at(c, y0 + y, x0 + x);
    return dst;
}

}  // namespace img
}  // namespace diffattn
