#include "splitshield/report.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace splitshield {

std::string fmt_metric(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string csv_to_string(const CsvTable& t) {
    std::string out;
    for (std::size_t i = 0; i < t.header.size(); ++i) {
        if (i) out += ",";
        out += t.header[i];
    }
    out += "\n";
    for (const auto& row : t.rows) {
        if (row.size() != t.header.size())
            throw std::invalid_argument("csv: row width does not match header");
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out += ",";
            out += row[i];
        }
        out += "\n";
    }
    return out;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return s;
}

void append_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw std::runtime_error("cannot append " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

namespace {

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& data) {
    put_be32(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const auto crc =
        ::crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
    put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

void write_png(const std::string& path, std::size_t width, std::size_t height,
               std::size_t channels, const std::vector<std::uint8_t>& pixels) {
    if (channels != 1 && channels != 3)
        throw std::invalid_argument("png: only grayscale and RGB supported");
    if (pixels.size() != width * height * channels)
        throw std::invalid_argument("png: pixel buffer size mismatch");

    // Raw scanlines with filter byte 0.
    std::vector<std::uint8_t> raw;
    raw.reserve(height * (1 + width * channels));
    for (std::size_t y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), pixels.begin() + static_cast<std::ptrdiff_t>(y * width * channels),
                   pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * width * channels));
    }
    uLongf compressed_size = ::compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> compressed(compressed_size);
    if (::compress2(compressed.data(), &compressed_size, raw.data(),
                    static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("png: compression failed");
    compressed.resize(compressed_size);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<std::uint8_t> ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(width));
    put_be32(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);                                  // bit depth
    ihdr.push_back(channels == 1 ? 0 : 2);              // color type
    ihdr.insert(ihdr.end(), {0, 0, 0});                 // compression/filter/interlace
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", compressed);
    put_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("png: cannot write " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

void write_mosaic_png(const std::string& path, const std::vector<Tensor>& rows,
                      std::size_t max_cols, std::size_t upscale) {
    if (rows.empty()) throw std::invalid_argument("mosaic: no rows");
    const Tensor& first = rows.front();
    if (first.ndim() != 4) throw std::invalid_argument("mosaic: rows must be NCHW batches");
    const std::size_t c = first.dim(1), h = first.dim(2), w = first.dim(3);
    for (const auto& r : rows)
        if (r.dim(1) != c || r.dim(2) != h || r.dim(3) != w)
            throw std::invalid_argument("mosaic: image shapes differ between rows");
    const std::size_t cols = std::min(max_cols, first.dim(0));
    const std::size_t out_c = (c == 3) ? 3 : 1;
    const std::size_t pad = 2;
    const std::size_t cell_w = w * upscale, cell_h = h * upscale;
    const std::size_t width = cols * cell_w + (cols + 1) * pad;
    const std::size_t height = rows.size() * cell_h + (rows.size() + 1) * pad;
    std::vector<std::uint8_t> pixels(width * height * out_c, 32);  // dark separators

    for (std::size_t r = 0; r < rows.size(); ++r) {
        const Tensor& batch = rows[r];
        const std::size_t n_images = std::min(cols, batch.dim(0));
        for (std::size_t i = 0; i < n_images; ++i) {
            const std::size_t x0 = pad + i * (cell_w + pad);
            const std::size_t y0 = pad + r * (cell_h + pad);
            for (std::size_t py = 0; py < cell_h; ++py) {
                for (std::size_t px = 0; px < cell_w; ++px) {
                    const std::size_t sy = py / upscale, sx = px / upscale;
                    for (std::size_t ch = 0; ch < out_c; ++ch) {
                        const std::size_t src_ch = (c == 3) ? ch : 0;
                        float v = batch.at4(i, src_ch, sy, sx);
                        v = std::min(1.0f, std::max(0.0f, v));
                        pixels[((y0 + py) * width + (x0 + px)) * out_c + ch] =
                            static_cast<std::uint8_t>(std::lround(v * 255.0f));
                    }
                }
            }
        }
    }
    write_png(path, width, height, out_c, pixels);
}

}  // namespace splitshield
