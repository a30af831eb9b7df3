#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "microsegnet/array2d.hpp"

namespace microsegnet {

// Minimal PNG reader/writer for the dataset and report artifacts. Writes
// 8-bit grayscale or RGB, non-interlaced, filter type 0, fixed zlib level,
// so identical pixels always produce identical bytes. The reader handles
// any non-interlaced 8-bit grayscale/RGB/RGBA file with filters 0-4.
namespace png {

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                         const std::uint8_t* data, std::size_t len) {
    put_u32(out, static_cast<std::uint32_t>(len));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    if (len > 0) out.insert(out.end(), data, data + len);
    const uLong crc = crc32(0L, out.data() + start, static_cast<uInt>(4 + len));
    put_u32(out, static_cast<std::uint32_t>(crc));
}

inline std::vector<std::uint8_t> deflate_bytes(const std::vector<std::uint8_t>& raw) {
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> out(bound);
    if (compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("png: deflate failed");
    out.resize(bound);
    return out;
}

inline std::vector<std::uint8_t> inflate_bytes(const std::vector<std::uint8_t>& comp,
                                               std::size_t expected) {
    std::vector<std::uint8_t> out(expected);
    uLongf len = static_cast<uLongf>(expected);
    const int rc = uncompress(out.data(), &len, comp.data(), static_cast<uLong>(comp.size()));
    if (rc != Z_OK || len != expected) throw std::runtime_error("png: inflate failed");
    return out;
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

inline std::vector<std::uint8_t> encode(const std::uint8_t* pixels, int rows, int cols,
                                        int channels) {
    if (rows <= 0 || cols <= 0) throw std::invalid_argument("png: empty image");
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<std::uint8_t> out(sig, sig + 8);

    std::uint8_t ihdr[13];
    ihdr[0] = static_cast<std::uint8_t>(static_cast<std::uint32_t>(cols) >> 24);
    ihdr[1] = static_cast<std::uint8_t>(static_cast<std::uint32_t>(cols) >> 16);
    ihdr[2] = static_cast<std::uint8_t>(static_cast<std::uint32_t>(cols) >> 8);
    ihdr[3] = static_cast<std::uint8_t>(cols);
    ihdr[4] = static_cast<std::uint8_t>(static_cast<std::uint32_t>(rows) >> 24);
    ihdr[5] = static_cast<std::uint8_t>(static_cast<std::uint32_t>(rows) >> 16);
    ihdr[6] = static_cast<std::uint8_t>(static_cast<std::uint32_t>(rows) >> 8);
    ihdr[7] = static_cast<std::uint8_t>(rows);
    ihdr[8] = 8;                                            // bit depth
    ihdr[9] = (channels == 1) ? 0 : 2;                      // gray or truecolor
    ihdr[10] = 0;                                           // compression
    ihdr[11] = 0;                                           // filter method
    ihdr[12] = 0;                                           // no interlace
    append_chunk(out, "IHDR", ihdr, sizeof(ihdr));

    const std::size_t stride = static_cast<std::size_t>(cols) * channels;
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(rows) * (stride + 1));
    for (int r = 0; r < rows; ++r) {
        raw.push_back(0);  // filter: none
        const std::uint8_t* row = pixels + static_cast<std::size_t>(r) * stride;
        raw.insert(raw.end(), row, row + stride);
    }
    const auto idat = deflate_bytes(raw);
    append_chunk(out, "IDAT", idat.data(), idat.size());
    append_chunk(out, "IEND", nullptr, 0);
    return out;
}

struct Decoded {
    int rows = 0, cols = 0, channels = 0;
    std::vector<std::uint8_t> pixels;  // row-major, interleaved channels
};

inline Decoded decode(const std::vector<std::uint8_t>& file, const std::string& name) {
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0)
        throw std::runtime_error("png: bad signature in " + name);

    Decoded img;
    int bit_depth = 0, color_type = -1;
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    while (pos + 8 <= file.size()) {
        const std::uint32_t len = get_u32(&file[pos]);
        if (pos + 12 + len > file.size()) throw std::runtime_error("png: truncated chunk in " + name);
        const char* type = reinterpret_cast<const char*>(&file[pos + 4]);
        const std::uint8_t* data = &file[pos + 8];
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw std::runtime_error("png: bad IHDR in " + name);
            img.cols = static_cast<int>(get_u32(data));
            img.rows = static_cast<int>(get_u32(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            if (data[12] != 0) throw std::runtime_error("png: interlaced files unsupported: " + name);
            if (bit_depth != 8) throw std::runtime_error("png: only 8-bit files supported: " + name);
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    int file_channels = 0;
    switch (color_type) {
        case 0: file_channels = 1; break;
        case 2: file_channels = 3; break;
        case 6: file_channels = 4; break;
        default: throw std::runtime_error("png: unsupported color type in " + name);
    }
    if (img.rows <= 0 || img.cols <= 0) throw std::runtime_error("png: missing IHDR in " + name);

    const std::size_t stride = static_cast<std::size_t>(img.cols) * file_channels;
    const auto raw = inflate_bytes(idat, static_cast<std::size_t>(img.rows) * (stride + 1));

    img.channels = file_channels;
    img.pixels.resize(static_cast<std::size_t>(img.rows) * stride);
    std::vector<std::uint8_t> prev(stride, 0);
    for (int r = 0; r < img.rows; ++r) {
        const std::uint8_t filter = raw[static_cast<std::size_t>(r) * (stride + 1)];
        const std::uint8_t* src = &raw[static_cast<std::size_t>(r) * (stride + 1) + 1];
        std::uint8_t* dst = &img.pixels[static_cast<std::size_t>(r) * stride];
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = (i >= static_cast<std::size_t>(file_channels))
                              ? dst[i - file_channels] : 0;
            const int b = prev[i];
            const int c = (i >= static_cast<std::size_t>(file_channels))
                              ? prev[i - file_channels] : 0;
            int x = src[i];
            switch (filter) {
                case 0: break;
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: x += paeth(a, b, c); break;
                default: throw std::runtime_error("png: bad filter in " + name);
            }
            dst[i] = static_cast<std::uint8_t>(x & 0xff);
        }
        std::memcpy(prev.data(), dst, stride);
    }
    return img;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                     std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace detail

inline void write_gray8(const std::string& path, const Array2D<std::uint8_t>& img) {
    detail::write_file(path, detail::encode(img.data(), img.rows(), img.cols(), 1));
}

inline Array2D<std::uint8_t> read_gray8(const std::string& path) {
    const auto img = detail::decode(detail::read_file(path), path);
    Array2D<std::uint8_t> out(img.rows, img.cols);
    if (img.channels == 1) {
        std::memcpy(out.data(), img.pixels.data(), img.pixels.size());
    } else {
        // Collapse color to luminance; dataset files are written as gray.
        for (int r = 0; r < img.rows; ++r)
            for (int c = 0; c < img.cols; ++c) {
                const std::uint8_t* p =
                    &img.pixels[(static_cast<std::size_t>(r) * img.cols + c) * img.channels];
                out(r, c) = static_cast<std::uint8_t>((p[0] * 299 + p[1] * 587 + p[2] * 114) / 1000);
            }
    }
    return out;
}

// Interleaved RGB rows, 3 bytes per pixel. Used for qualitative overlays.
inline void write_rgb8(const std::string& path, const std::vector<std::uint8_t>& rgb, int rows,
                       int cols) {
    if (rgb.size() != static_cast<std::size_t>(rows) * cols * 3)
        throw std::invalid_argument("write_rgb8: buffer size mismatch");
    detail::write_file(path, detail::encode(rgb.data(), rows, cols, 3));
}

}  // namespace png

// float [0,1] image <-> 8-bit PNG. Quantization is round-to-nearest; the
// synthetic generator emits intensities already on the 8-bit grid so a
// write/load round trip reproduces them exactly.
inline Array2D<std::uint8_t> quantize_u8(const Array2D<float>& img) {
    Array2D<std::uint8_t> out(img.rows(), img.cols());
    for (std::size_t i = 0; i < img.size(); ++i) {
        float v = img.data()[i];
        v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
        out.data()[i] = static_cast<std::uint8_t>(v * 255.0f + 0.5f);
    }
    return out;
}

inline Array2D<float> dequantize_u8(const Array2D<std::uint8_t>& img) {
    Array2D<float> out(img.rows(), img.cols());
    for (std::size_t i = 0; i < img.size(); ++i)
        out.data()[i] = static_cast<float>(img.data()[i]) / 255.0f;
    return out;
}

}  // namespace microsegnet
