#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ngs/core.hpp"
#include "ngs/image.hpp"

namespace ngs {

// ---------------------------------------------------------------------------
// PPM (ASCII P3)
// ---------------------------------------------------------------------------

/// Writes ASCII PPM. The default maxval keeps 16-bit precision so synthetic
/// ground truth quantizes at ~8e-6 per channel.
inline void write_ppm(const std::string& path, const Image& image, int maxval = 65535) {
    if (maxval < 1 || maxval > 65535) throw InvalidInput("write_ppm: maxval out of range");
    std::ofstream os(path);
    if (!os) throw IoError("write_ppm: cannot open " + path);
    os << "P3\n" << image.width << ' ' << image.height << '\n' << maxval << '\n';
    int col = 0;
    for (std::size_t i = 0; i < image.data.size(); ++i) {
        const double v = std::clamp(image.data[i], 0.0, 1.0);
        os << static_cast<int>(std::lround(v * maxval));
        if (++col % 12 == 0) {
            os << '\n';
        } else {
            os << ' ';
        }
    }
    os << '\n';
    if (!os) throw IoError("write_ppm: write failed for " + path);
}

namespace detail {

inline int ppm_next_int(std::istream& is) {
    for (;;) {
        const int c = is.peek();
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else if (std::isspace(c)) {
            is.get();
        } else {
            break;
        }
        if (!is) throw IoError("ppm: truncated header");
    }
    int value = 0;
    if (!(is >> value)) throw IoError("ppm: expected integer");
    return value;
}

}  // namespace detail

inline Image read_ppm(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("read_ppm: cannot open " + path);
    std::string magic;
    is >> magic;
    if (magic != "P3") throw IoError("read_ppm: only ASCII P3 is supported");
    const int w = detail::ppm_next_int(is);
    const int h = detail::ppm_next_int(is);
    const int maxval = detail::ppm_next_int(is);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) {
        throw IoError("read_ppm: bad header in " + path);
    }
    Image image(w, h);
    for (auto& v : image.data) {
        v = static_cast<double>(detail::ppm_next_int(is)) / maxval;
    }
    return image;
}

// ---------------------------------------------------------------------------
// PNG: 8-bit RGB writer (stored deflate), reader with a full inflate
// ---------------------------------------------------------------------------

namespace detail::png {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n, std::uint32_t seed = 0) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = seed ^ 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

inline std::uint32_t adler32(const std::uint8_t* data, std::size_t n) {
    std::uint32_t a = 1, b = 0;
    for (std::size_t i = 0; i < n; ++i) {
        a = (a + data[i]) % 65521u;
        b = (b + a) % 65521u;
    }
    return (b << 16) | a;
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline void write_chunk(std::vector<std::uint8_t>& out, const char type[4],
                        const std::vector<std::uint8_t>& payload) {
    put_u32(out, static_cast<std::uint32_t>(payload.size()));
    std::vector<std::uint8_t> body(type, type + 4);
    body.insert(body.end(), payload.begin(), payload.end());
    out.insert(out.end(), body.begin(), body.end());
    put_u32(out, crc32(body.data(), body.size()));
}

/// Minimal bit reader, LSB first, as deflate requires.
struct BitReader {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos = 0;
    int bit = 0;

    int read_bit() {
        if (pos >= size) throw IoError("png: truncated deflate stream");
        const int v = (data[pos] >> bit) & 1;
        if (++bit == 8) {
            bit = 0;
            ++pos;
        }
        return v;
    }
    std::uint32_t read_bits(int n) {
        std::uint32_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint32_t>(read_bit()) << i;
        return v;
    }
    void align_byte() {
        if (bit != 0) {
            bit = 0;
            ++pos;
        }
    }
};

/// Canonical Huffman decoder: first-code-per-length walk.
struct Huffman {
    std::array<int, 16> count{};
    std::vector<int> symbols;

    void build(const std::vector<int>& lengths) {
        count.fill(0);
        for (int l : lengths) {
            if (l > 0) ++count[l];
        }
        symbols.clear();
        std::array<int, 16> offsets{};
        int total = 0;
        for (int l = 1; l < 16; ++l) {
            offsets[l] = total;
            total += count[l];
        }
        symbols.resize(total);
        for (int s = 0; s < static_cast<int>(lengths.size()); ++s) {
            if (lengths[s] > 0) symbols[offsets[lengths[s]]++] = s;
        }
    }

    int decode(BitReader& br) const {
        int code = 0, first = 0, index = 0;
        for (int len = 1; len < 16; ++len) {
            code |= br.read_bit();
            const int n = count[len];
            if (code - first < n) return symbols[index + (code - first)];
            index += n;
            first = (first + n) << 1;
            code <<= 1;
        }
        throw IoError("png: invalid huffman code");
    }
};

inline std::vector<std::uint8_t> inflate(const std::uint8_t* data, std::size_t size) {
    BitReader br{data, size};
    std::vector<std::uint8_t> out;

    static constexpr int kLenBase[29] = {3,  4,  5,  6,  7,  8,  9,  10, 11,  13,  15,  17,  19, 23,
                                         27, 31, 35, 43, 51, 59, 67, 83, 99, 115, 131, 163, 195, 227,
                                         258};
    static constexpr int kLenExtra[29] = {0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2,
                                          2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0};
    static constexpr int kDistBase[30] = {1,    2,    3,    4,    5,    7,     9,     13,
                                          17,   25,   33,   49,   65,   97,    129,   193,
                                          257,  385,  513,  769,  1025, 1537,  2049,  3073,
                                          4097, 6145, 8193, 12289, 16385, 24577};
    static constexpr int kDistExtra[30] = {0, 0, 0, 0, 1, 1, 2, 2,  3,  3,  4,  4,  5,  5,  6,
                                           6, 7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12, 13, 13};

    for (;;) {
        const int final_block = br.read_bit();
        const int type = static_cast<int>(br.read_bits(2));
        if (type == 0) {  // stored
            br.align_byte();
            if (br.pos + 4 > br.size) throw IoError("png: truncated stored block");
            const int len = br.data[br.pos] | (br.data[br.pos + 1] << 8);
            const int nlen = br.data[br.pos + 2] | (br.data[br.pos + 3] << 8);
            if ((len ^ 0xFFFF) != nlen) throw IoError("png: stored block length mismatch");
            br.pos += 4;
            if (br.pos + len > br.size) throw IoError("png: truncated stored block data");
            out.insert(out.end(), br.data + br.pos, br.data + br.pos + len);
            br.pos += len;
        } else if (type == 1 || type == 2) {
            Huffman lit, dist;
            if (type == 1) {  // fixed tables
                std::vector<int> ll(288);
                for (int i = 0; i < 144; ++i) ll[i] = 8;
                for (int i = 144; i < 256; ++i) ll[i] = 9;
                for (int i = 256; i < 280; ++i) ll[i] = 7;
                for (int i = 280; i < 288; ++i) ll[i] = 8;
                lit.build(ll);
                dist.build(std::vector<int>(30, 5));
            } else {  // dynamic tables
                const int hlit = static_cast<int>(br.read_bits(5)) + 257;
                const int hdist = static_cast<int>(br.read_bits(5)) + 1;
                const int hclen = static_cast<int>(br.read_bits(4)) + 4;
                static constexpr int kOrder[19] = {16, 17, 18, 0, 8,  7, 9,  6, 10, 5,
                                                   11, 4,  12, 3, 13, 2, 14, 1, 15};
                std::vector<int> clen(19, 0);
                for (int i = 0; i < hclen; ++i) clen[kOrder[i]] = static_cast<int>(br.read_bits(3));
                Huffman cl;
                cl.build(clen);
                std::vector<int> lengths;
                lengths.reserve(hlit + hdist);
                while (static_cast<int>(lengths.size()) < hlit + hdist) {
                    const int sym = cl.decode(br);
                    if (sym < 16) {
                        lengths.push_back(sym);
                    } else if (sym == 16) {
                        if (lengths.empty()) throw IoError("png: bad length repeat");
                        const int n = 3 + static_cast<int>(br.read_bits(2));
                        lengths.insert(lengths.end(), n, lengths.back());
                    } else if (sym == 17) {
                        const int n = 3 + static_cast<int>(br.read_bits(3));
                        lengths.insert(lengths.end(), n, 0);
                    } else {
                        const int n = 11 + static_cast<int>(br.read_bits(7));
                        lengths.insert(lengths.end(), n, 0);
                    }
                }
                lit.build(std::vector<int>(lengths.begin(), lengths.begin() + hlit));
                dist.build(std::vector<int>(lengths.begin() + hlit, lengths.end()));
            }
            for (;;) {
                const int sym = lit.decode(br);
                if (sym < 256) {
                    out.push_back(static_cast<std::uint8_t>(sym));
                } else if (sym == 256) {
                    break;
                } else {
                    const int li = sym - 257;
                    if (li >= 29) throw IoError("png: bad length symbol");
                    const int length = kLenBase[li] + static_cast<int>(br.read_bits(kLenExtra[li]));
                    const int di = dist.decode(br);
                    if (di >= 30) throw IoError("png: bad distance symbol");
                    const int distance =
                        kDistBase[di] + static_cast<int>(br.read_bits(kDistExtra[di]));
                    if (distance > static_cast<int>(out.size())) {
                        throw IoError("png: distance beyond output");
                    }
                    for (int i = 0; i < length; ++i) {
                        out.push_back(out[out.size() - distance]);
                    }
                }
            }
        } else {
            throw IoError("png: invalid block type");
        }
        if (final_block) break;
    }
    return out;
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail::png

inline void write_png(const std::string& path, const Image& image) {
    using namespace detail::png;
    const int w = image.width, h = image.height;

    // Filter 0 scanlines.
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(h) * (1 + 3 * w));
    for (int y = 0; y < h; ++y) {
        raw.push_back(0);
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < 3; ++ch) {
                const double v = std::clamp(image.at(x, y, ch), 0.0, 1.0);
                raw.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
            }
        }
    }

    // zlib wrapper with stored deflate blocks.
    std::vector<std::uint8_t> z;
    z.push_back(0x78);
    z.push_back(0x01);
    std::size_t off = 0;
    while (off < raw.size() || raw.empty()) {
        const std::size_t n = std::min<std::size_t>(65535, raw.size() - off);
        const bool last = off + n == raw.size();
        z.push_back(last ? 1 : 0);
        z.push_back(static_cast<std::uint8_t>(n & 0xFF));
        z.push_back(static_cast<std::uint8_t>(n >> 8));
        z.push_back(static_cast<std::uint8_t>(~n & 0xFF));
        z.push_back(static_cast<std::uint8_t>((~n >> 8) & 0xFF));
        z.insert(z.end(), raw.begin() + off, raw.begin() + off + n);
        off += n;
        if (last) break;
    }
    put_u32(z, adler32(raw.data(), raw.size()));

    std::vector<std::uint8_t> png;
    const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    png.insert(png.end(), sig, sig + 8);
    std::vector<std::uint8_t> ihdr;
    put_u32(ihdr, static_cast<std::uint32_t>(w));
    put_u32(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // RGB
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    write_chunk(png, "IHDR", ihdr);
    write_chunk(png, "IDAT", z);
    write_chunk(png, "IEND", {});

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_png: cannot open " + path);
    os.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
    if (!os) throw IoError("write_png: write failed for " + path);
}

inline Image read_png(const std::string& path) {
    using namespace detail::png;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_png: cannot open " + path);
    std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
    const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0) {
        throw IoError("read_png: bad signature in " + path);
    }

    int w = 0, h = 0, bit_depth = 0, color_type = 0;
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    while (pos + 8 <= file.size()) {
        const std::uint32_t len = (file[pos] << 24) | (file[pos + 1] << 16) | (file[pos + 2] << 8) |
                                  file[pos + 3];
        const std::string type(file.begin() + pos + 4, file.begin() + pos + 8);
        if (pos + 8 + len + 4 > file.size()) throw IoError("read_png: truncated chunk");
        const std::uint8_t* payload = file.data() + pos + 8;
        if (type == "IHDR") {
            w = (payload[0] << 24) | (payload[1] << 16) | (payload[2] << 8) | payload[3];
            h = (payload[4] << 24) | (payload[5] << 16) | (payload[6] << 8) | payload[7];
            bit_depth = payload[8];
            color_type = payload[9];
            if (payload[12] != 0) throw IoError("read_png: interlacing not supported");
        } else if (type == "IDAT") {
            idat.insert(idat.end(), payload, payload + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 8 + len + 4;
    }
    if (w <= 0 || h <= 0) throw IoError("read_png: missing IHDR");
    if (bit_depth != 8 || (color_type != 2 && color_type != 6)) {
        throw IoError("read_png: only 8-bit RGB/RGBA is supported");
    }
    if (idat.size() < 2) throw IoError("read_png: missing IDAT");

    const std::vector<std::uint8_t> raw = inflate(idat.data() + 2, idat.size() - 2);
    const int channels = color_type == 2 ? 3 : 4;
    const std::size_t stride = static_cast<std::size_t>(w) * channels;
    if (raw.size() < static_cast<std::size_t>(h) * (stride + 1)) {
        throw IoError("read_png: scanline data too short");
    }

    std::vector<std::uint8_t> pix(static_cast<std::size_t>(h) * stride);
    for (int y = 0; y < h; ++y) {
        const std::uint8_t filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
        const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
        std::uint8_t* dst = pix.data() + static_cast<std::size_t>(y) * stride;
        const std::uint8_t* prev = y > 0 ? dst - stride : nullptr;
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<std::size_t>(channels) ? dst[i - channels] : 0;
            const int b = prev ? prev[i] : 0;
            const int c = (prev && i >= static_cast<std::size_t>(channels)) ? prev[i - channels] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw IoError("read_png: unknown filter type");
            }
            dst[i] = static_cast<std::uint8_t>(v & 0xFF);
        }
    }

    Image image(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < 3; ++ch) {
                image.at(x, y, ch) =
                    pix[static_cast<std::size_t>(y) * stride + x * channels + ch] / 255.0;
            }
        }
    }
    return image;
}

/// Dispatch on extension: .png or .ppm.
inline Image read_image(const std::string& path) {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".png") return read_png(path);
    return read_ppm(path);
}

inline void write_image(const std::string& path, const Image& image) {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".png") {
        write_png(path, image);
    } else {
        write_ppm(path, image);
    }
}

}  // namespace ngs
