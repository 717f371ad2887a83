#pragma once

// Binary PPM (P6) images, PGM (P5) masks and the tab-separated sample manifest.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "medfe/checkpoint.hpp"
#include "medfe/errors.hpp"
#include "medfe/layers.hpp"
#include "medfe/tensor.hpp"

namespace medfe {

/// [-1, 1] -> {0..255}, rounding half up.
inline std::uint8_t quantize(double v) {
  const double q = std::floor((std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

inline double dequantize(std::uint8_t q) { return static_cast<double>(q) / 255.0 * 2.0 - 1.0; }

/// Encodes sample `index` of an (n, 3, h, w) tensor.
inline std::string encode_ppm(const Tensor& img, std::int64_t index = 0) {
  const Shape s = img.shape();
  require(s.c() == 3, "PPM needs 3 channels, got " + s.str());
  require(index >= 0 && index < s.n(), "PPM: batch index out of range");
  std::string out = "P6\n" + std::to_string(s.w()) + " " + std::to_string(s.h()) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(3 * s.plane()));
  for (std::int64_t y = 0; y < s.h(); ++y)
    for (std::int64_t x = 0; x < s.w(); ++x)
      for (std::int64_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(quantize(img.at(index, c, y, x))));
  return out;
}

inline std::string encode_pgm(const Mask& mask, std::int64_t index = 0) {
  const Shape s = mask.shape();
  std::string out = "P5\n" + std::to_string(s.w()) + " " + std::to_string(s.h()) + "\n255\n";
  const double* m = mask.tensor().data() + index * s.plane();
  for (std::int64_t i = 0; i < s.plane(); ++i) out.push_back(static_cast<char>(m[i] == 1.0 ? 255 : 0));
  return out;
}

namespace detail {

struct NetpbmHeader {
  std::int64_t width = 0, height = 0;
  std::size_t payload = 0;  // offset of the first data byte
};

inline NetpbmHeader parse_netpbm_header(std::string_view bytes, std::string_view magic) {
  std::size_t pos = 0;
  if (bytes.substr(0, 2) != magic) throw ParseError("expected magic " + std::string(magic), 0);
  pos = 2;
  auto read_int = [&](const char* what) -> std::int64_t {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos])))
      throw ParseError(std::string("expected ") + what, pos);
    std::int64_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1 << 24)) throw ParseError(std::string(what) + " too large", pos);
      ++pos;
    }
    return v;
  };
  NetpbmHeader h;
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw ParseError("expected whitespace after magic", pos);
  h.width = read_int("width");
  h.height = read_int("height");
  const std::int64_t maxval = read_int("maxval");
  if (h.width <= 0 || h.height <= 0) throw ParseError("image dimensions must be positive", pos);
  if (maxval != 255) throw ParseError("only maxval 255 is supported", pos);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw ParseError("expected single whitespace before pixel data", pos);
  h.payload = pos + 1;
  return h;
}

}  // namespace detail

inline Tensor decode_ppm(std::string_view bytes) {
  const auto h = detail::parse_netpbm_header(bytes, "P6");
  const std::size_t need = static_cast<std::size_t>(3 * h.width * h.height);
  if (bytes.size() - h.payload < need) throw ParseError("truncated pixel data", bytes.size());
  const std::int64_t P = h.width * h.height;
  std::vector<double> v(static_cast<std::size_t>(3 * P));
  for (std::int64_t i = 0; i < P; ++i)
    for (std::int64_t c = 0; c < 3; ++c)
      v[c * P + i] = dequantize(static_cast<std::uint8_t>(bytes[h.payload + 3 * i + c]));
  return Tensor::from(Shape{1, 3, h.height, h.width}, std::move(v));
}

/// Zero bytes are holes; anything else is valid.
inline Mask decode_pgm_mask(std::string_view bytes) {
  const auto h = detail::parse_netpbm_header(bytes, "P5");
  const std::size_t need = static_cast<std::size_t>(h.width * h.height);
  if (bytes.size() - h.payload < need) throw ParseError("truncated pixel data", bytes.size());
  std::vector<double> v(need);
  for (std::size_t i = 0; i < need; ++i) v[i] = bytes[h.payload + i] == 0 ? 0.0 : 1.0;
  return Mask(Tensor::from(Shape{1, 1, h.height, h.width}, std::move(v)));
}

inline Tensor read_ppm(const std::string& path) {
  try {
    return decode_ppm(detail::read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.reason(), e.offset());
  }
}

inline Mask read_pgm_mask(const std::string& path) {
  try {
    return decode_pgm_mask(detail::read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.reason(), e.offset());
  }
}

inline void write_ppm(const std::string& path, const Tensor& img, std::int64_t index = 0) {
  detail::write_file(path, encode_ppm(img, index));
}

inline void write_pgm_mask(const std::string& path, const Mask& mask, std::int64_t index = 0) {
  detail::write_file(path, encode_pgm(mask, index));
}

struct ManifestEntry {
  std::string image, structure, mask;
};

/// One sample per line: image, structure and mask paths separated by tabs.
/// Relative paths are resolved against the manifest's directory; blank lines
/// and lines starting with '#' are skipped.
inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  const std::filesystem::path dir = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return fp.is_absolute() ? fp.string() : (dir / fp).string();
  };
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    const std::size_t line_start = offset;
    offset += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 3) throw ParseError(path + ": expected 3 tab-separated fields", line_start);
    out.push_back({resolve(fields[0]), resolve(fields[1]), resolve(fields[2])});
  }
  return out;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::string text;
  for (const auto& e : entries) text += e.image + "\t" + e.structure + "\t" + e.mask + "\n";
  detail::write_file(path, text);
}

}  // namespace medfe
