#include "consept/png_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace consept::data {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void write_chunk(std::vector<uint8_t>& out, const char type[4],
                 const std::vector<uint8_t>& payload) {
    put_u32(out, static_cast<uint32_t>(payload.size()));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    uint32_t crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
    put_u32(out, crc);
}

uint8_t paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
    if (pb <= pc) return static_cast<uint8_t>(b);
    return static_cast<uint8_t>(c);
}

}  // namespace

void write_png_rgb(const std::string& path, int w, int h, const std::vector<uint8_t>& rgb) {
    if (rgb.size() != static_cast<size_t>(w) * h * 3)
        throw std::invalid_argument("write_png_rgb: pixel buffer size mismatch");

    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(h) * (static_cast<size_t>(w) * 3 + 1));
    for (int y = 0; y < h; ++y) {
        raw.push_back(0);  // filter: none
        const uint8_t* row = rgb.data() + static_cast<size_t>(y) * w * 3;
        raw.insert(raw.end(), row, row + static_cast<size_t>(w) * 3);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("write_png_rgb: deflate failed");
    compressed.resize(bound);

    std::vector<uint8_t> out{137, 80, 78, 71, 13, 10, 26, 10};
    std::vector<uint8_t> ihdr;
    put_u32(ihdr, static_cast<uint32_t>(w));
    put_u32(ihdr, static_cast<uint32_t>(h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // RGB
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    write_chunk(out, "IHDR", ihdr);
    write_chunk(out, "IDAT", compressed);
    write_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_png_rgb: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("write_png_rgb: write failed for " + path);
}

std::vector<uint8_t> read_png_rgb(const std::string& path, int& w, int& h) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_png_rgb: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw std::runtime_error("read_png_rgb: not a PNG file: " + path);

    w = h = 0;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    while (pos + 12 <= bytes.size()) {
        uint32_t len = get_u32(bytes.data() + pos);
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        if (pos + 12 + len > bytes.size())
            throw std::runtime_error("read_png_rgb: truncated chunk in " + path);
        const uint8_t* payload = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            w = static_cast<int>(get_u32(payload));
            h = static_cast<int>(get_u32(payload + 4));
            if (payload[8] != 8 || payload[9] != 2 || payload[12] != 0)
                throw std::runtime_error("read_png_rgb: only 8-bit RGB supported");
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (w <= 0 || h <= 0 || idat.empty())
        throw std::runtime_error("read_png_rgb: missing image data in " + path);

    size_t stride = static_cast<size_t>(w) * 3;
    std::vector<uint8_t> raw(static_cast<size_t>(h) * (stride + 1));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw std::runtime_error("read_png_rgb: inflate failed for " + path);

    std::vector<uint8_t> rgb(static_cast<size_t>(h) * stride);
    std::vector<uint8_t> prev(stride, 0);
    for (int y = 0; y < h; ++y) {
        const uint8_t* src = raw.data() + static_cast<size_t>(y) * (stride + 1);
        uint8_t filter = src[0];
        uint8_t* dst = rgb.data() + static_cast<size_t>(y) * stride;
        for (size_t i = 0; i < stride; ++i) {
            int x = src[1 + i];
            int a = i >= 3 ? dst[i - 3] : 0;      // left
            int b = prev[i];                       // up
            int c = i >= 3 ? prev[i - 3] : 0;      // up-left
            switch (filter) {
                case 0: break;
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: x += paeth(a, b, c); break;
                default: throw std::runtime_error("read_png_rgb: unknown filter");
            }
            dst[i] = static_cast<uint8_t>(x & 0xff);
        }
        std::memcpy(prev.data(), dst, stride);
    }
    return rgb;
}

std::vector<uint8_t> tensor_to_rgb(const nn::Tensor& image) {
    int64_t h = image.dim(1), w = image.dim(2);
    std::vector<uint8_t> rgb(static_cast<size_t>(h) * w * 3);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c) {
                double v = image.at(c, y, x);
                v = std::min(1.0, std::max(0.0, v));
                rgb[static_cast<size_t>((y * w + x) * 3 + c)] =
                    static_cast<uint8_t>(std::lround(v * 255.0));
            }
    return rgb;
}

nn::Tensor rgb_to_tensor(const std::vector<uint8_t>& rgb, int w, int h) {
    nn::Tensor image({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                image.at(c, y, x) =
                    rgb[static_cast<size_t>((static_cast<size_t>(y) * w + x) * 3 + c)] / 255.0;
    return image;
}

}  // namespace consept::data
