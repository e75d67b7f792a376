#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <zlib.h>

#include "m3bs/errors.hpp"
#include "m3bs/hsi/dataset.hpp"
#include "m3bs/hsi/io.hpp"

namespace m3bs::eval {

using Rgb = std::array<std::uint8_t, 3>;

// Class c (1-based) is drawn with palette[(c - 1) % 16]; 0 is background.
inline const std::array<Rgb, 16>& palette() {
  static const std::array<Rgb, 16> p = {{{230, 25, 75},   {60, 180, 75},   {255, 225, 25},  {0, 130, 200},
                                         {245, 130, 48},  {145, 30, 180},  {70, 240, 240},  {240, 50, 230},
                                         {210, 245, 60},  {250, 190, 212}, {0, 128, 128},   {220, 190, 255},
                                         {170, 110, 40},  {255, 250, 200}, {128, 0, 0},     {170, 255, 195}}};
  return p;
}

inline constexpr Rgb kBackground = {0, 0, 0};

namespace detail {

inline void put_be32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

inline void put_chunk(std::string& png, const char* type, const std::string& data) {
  put_be32(png, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  png += body;
  put_be32(png, static_cast<std::uint32_t>(
                    ::crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

// zlib stream of stored (uncompressed) deflate blocks: identical bytes on
// every platform and zlib version.
inline std::string zlib_stored(const std::string& raw) {
  std::string out = {'\x78', '\x01'};
  std::size_t pos = 0;
  do {
    const std::size_t n = std::min<std::size_t>(65535, raw.size() - pos);
    const bool last = pos + n == raw.size();
    out.push_back(last ? '\x01' : '\x00');
    out.push_back(static_cast<char>(n & 0xff));
    out.push_back(static_cast<char>(n >> 8));
    out.push_back(static_cast<char>(~n & 0xff));
    out.push_back(static_cast<char>((~n >> 8) & 0xff));
    out.append(raw, pos, n);
    pos += n;
  } while (pos < raw.size());
  put_be32(out, static_cast<std::uint32_t>(
                    ::adler32(1L, reinterpret_cast<const Bytef*>(raw.data()), static_cast<uInt>(raw.size()))));
  return out;
}

}  // namespace detail

// 8-bit RGB PNG of a label raster (rows top to bottom).
inline std::string encode_png(const std::vector<std::uint16_t>& labels, std::size_t height, std::size_t width) {
  if (labels.size() != height * width || height == 0 || width == 0) {
    throw ShapeError("render: raster of " + std::to_string(labels.size()) + " values is not " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  std::string raw;
  raw.reserve(height * (1 + 3 * width));
  for (std::size_t r = 0; r < height; ++r) {
    raw.push_back('\0');  // filter: none
    for (std::size_t c = 0; c < width; ++c) {
      const auto v = labels[r * width + c];
      const Rgb& px = v == 0 ? kBackground : palette()[(v - 1) % 16];
      raw.append(reinterpret_cast<const char*>(px.data()), 3);
    }
  }
  std::string ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(width));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr += std::string{'\x08', '\x02', '\x00', '\x00', '\x00'};
  std::string png = "\x89PNG\r\n\x1a\n";
  detail::put_chunk(png, "IHDR", ihdr);
  detail::put_chunk(png, "IDAT", detail::zlib_stored(raw));
  detail::put_chunk(png, "IEND", "");
  return png;
}

// Predictions are a full height x width raster.  Unless full_image is set,
// pixels without a ground-truth label are drawn as background.
inline std::string render_map(const hsi::HsiDataset& ds, const std::vector<std::uint16_t>& predictions,
                              bool full_image = false) {
  if (predictions.size() != ds.n_pixels()) {
    throw ShapeError("render: " + std::to_string(predictions.size()) + " predictions for a " +
                     std::to_string(ds.height) + "x" + std::to_string(ds.width) + " dataset");
  }
  std::vector<std::uint16_t> shown(predictions);
  for (std::size_t p = 0; p < shown.size(); ++p) {
    if (!full_image && ds.labels[p] == 0) shown[p] = 0;
    if (shown[p] > ds.n_class) throw ValidationError("render: prediction " + std::to_string(shown[p]) + " exceeds n_class");
  }
  return encode_png(shown, ds.height, ds.width);
}

inline void write_map(const std::string& path, const hsi::HsiDataset& ds, const std::vector<std::uint16_t>& predictions,
                      bool full_image = false) {
  hsi::detail::write_file(path, render_map(ds, predictions, full_image));
}

}  // namespace m3bs::eval
