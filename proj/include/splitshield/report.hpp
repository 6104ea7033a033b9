#pragma once

#include <string>
#include <vector>

#include "splitshield/tensor.hpp"

namespace splitshield {

// Deterministic text formatting for report files: identical inputs must give
// byte-identical CSVs.
std::string fmt_metric(double v);  // fixed %.6f

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

std::string csv_to_string(const CsvTable& t);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);
void append_text_file(const std::string& path, const std::string& content);

// Minimal PNG writer (8-bit grayscale or RGB, zlib-compressed).
void write_png(const std::string& path, std::size_t width, std::size_t height,
               std::size_t channels, const std::vector<std::uint8_t>& pixels);

// Mosaic of image rows: every entry of `rows` is an (N,C,H,W) batch in [0,1]
// with identical shapes; row r of the mosaic shows its first `max_cols`
// images, nearest-neighbor upscaled.
void write_mosaic_png(const std::string& path, const std::vector<Tensor>& rows,
                      std::size_t max_cols = 8, std::size_t upscale = 8);

}  // namespace splitshield
