#pragma once

// ".hsic" container: one UTF-8 JSON header line
//   {"name", "n_band", "height", "width", "n_class", "dtype": "f32", "layout": "band-major"}
// followed by the little-endian float32 cube (band-major) and the
// little-endian uint16 label raster (row-major).
//
// Label rasters (predictions) use the same idea with header
//   {"height", "width", "dtype": "u16"}
// followed by the uint16 raster.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m3bs/errors.hpp"
#include "m3bs/hsi/dataset.hpp"

namespace m3bs::hsi {

namespace detail {

template <typename T>
void append_le(std::string& out, const std::vector<T>& values) {
  static_assert(std::is_trivially_copyable_v<T>);
  const std::size_t offset = out.size();
  out.resize(offset + values.size() * sizeof(T));
  std::memcpy(out.data() + offset, values.data(), values.size() * sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      char* p = out.data() + offset + i * sizeof(T);
      std::reverse(p, p + sizeof(T));
    }
  }
}

template <typename T>
void read_le(const char* src, std::size_t count, std::vector<T>& out) {
  out.resize(count);
  std::memcpy(out.data(), src, count * sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    auto* bytes = reinterpret_cast<char*>(out.data());
    for (std::size_t i = 0; i < count; ++i) std::reverse(bytes + i * sizeof(T), bytes + (i + 1) * sizeof(T));
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to '" + path + "'");
}

inline nlohmann::json parse_header(const std::string& bytes, std::size_t& payload_offset) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw FormatError("malformed header: missing newline terminator");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  if (!header.is_object()) throw FormatError("malformed header: not a JSON object");
  payload_offset = nl + 1;
  return header;
}

template <typename T>
T header_field(const nlohmann::json& h, const char* key) {
  if (!h.contains(key)) throw FormatError(std::string("malformed header: missing '") + key + "'");
  try {
    return h.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(std::string("malformed header: bad type for '") + key + "'");
  }
}

}  // namespace detail

inline std::string encode_hsic(const HsiDataset& ds) {
  if (ds.cube.size() != ds.n_band * ds.height * ds.width || ds.labels.size() != ds.height * ds.width) {
    throw ValidationError("dataset '" + ds.name + "' arrays do not match its dimensions");
  }
  const nlohmann::ordered_json header = {{"name", ds.name},       {"n_band", ds.n_band},
                                         {"height", ds.height},   {"width", ds.width},
                                         {"n_class", ds.n_class}, {"dtype", "f32"},
                                         {"layout", "band-major"}};
  std::string out = header.dump() + "\n";
  detail::append_le(out, ds.cube);
  detail::append_le(out, ds.labels);
  return out;
}

inline HsiDataset decode_hsic(const std::string& bytes, bool normalize = true) {
  std::size_t offset = 0;
  const auto h = detail::parse_header(bytes, offset);
  const auto dtype = detail::header_field<std::string>(h, "dtype");
  if (dtype != "f32") throw FormatError("unsupported dtype '" + dtype + "'");
  if (h.contains("layout") && h.at("layout") != "band-major") throw FormatError("unsupported layout");
  HsiDataset ds;
  ds.name = detail::header_field<std::string>(h, "name");
  ds.n_band = detail::header_field<std::size_t>(h, "n_band");
  ds.height = detail::header_field<std::size_t>(h, "height");
  ds.width = detail::header_field<std::size_t>(h, "width");
  ds.n_class = detail::header_field<std::size_t>(h, "n_class");
  if (ds.n_band == 0 || ds.height == 0 || ds.width == 0) throw FormatError("malformed header: zero dimension");
  const std::size_t n_cube = ds.n_band * ds.height * ds.width;
  const std::size_t n_lab = ds.height * ds.width;
  const std::size_t expected = n_cube * sizeof(float) + n_lab * sizeof(std::uint16_t);
  if (bytes.size() - offset != expected) {
    throw FormatError("size mismatch: payload has " + std::to_string(bytes.size() - offset) + " bytes, expected " +
                      std::to_string(expected));
  }
  detail::read_le(bytes.data() + offset, n_cube, ds.cube);
  detail::read_le(bytes.data() + offset + n_cube * sizeof(float), n_lab, ds.labels);
  if (normalize) normalize_bands(ds);
  return ds;
}

inline void save(const HsiDataset& ds, const std::string& path) { detail::write_file(path, encode_hsic(ds)); }

// Reads a container; bands are min-max normalized to [0, 1] unless
// `normalize` is false.
inline HsiDataset load(const std::string& path, bool normalize = true) {
  return decode_hsic(detail::read_file(path), normalize);
}

struct LabelRaster {
  std::size_t height = 0, width = 0;
  std::vector<std::uint16_t> labels;
};

inline void save_label_raster(const LabelRaster& r, const std::string& path) {
  if (r.labels.size() != r.height * r.width) throw ValidationError("label raster size mismatch");
  const nlohmann::ordered_json header = {{"height", r.height}, {"width", r.width}, {"dtype", "u16"}};
  std::string out = header.dump() + "\n";
  detail::append_le(out, r.labels);
  detail::write_file(path, out);
}

inline LabelRaster load_label_raster(const std::string& path) {
  const auto bytes = detail::read_file(path);
  std::size_t offset = 0;
  const auto h = detail::parse_header(bytes, offset);
  if (detail::header_field<std::string>(h, "dtype") != "u16") throw FormatError("label raster dtype must be u16");
  LabelRaster r;
  r.height = detail::header_field<std::size_t>(h, "height");
  r.width = detail::header_field<std::size_t>(h, "width");
  if (bytes.size() - offset != r.height * r.width * sizeof(std::uint16_t)) throw FormatError("label raster size mismatch");
  detail::read_le(bytes.data() + offset, r.height * r.width, r.labels);
  return r;
}

}  // namespace m3bs::hsi
