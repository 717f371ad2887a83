#pragma once

// Flat binary parameter container:
//   "MEDFE1"
//   repeated until EOF:
//     u32 name length, UTF-8 name bytes,
//     u32 rank, rank x u32 dims,
//     prod(dims) x f64 values
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "medfe/errors.hpp"
#include "medfe/tensor.hpp"

namespace medfe {

inline constexpr std::string_view kCheckpointMagic = "MEDFE1";

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f64(std::string& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw ParseError(std::string("checkpoint truncated while reading ") + what, pos_);
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<NamedTensor>& entries) {
  std::string out(kCheckpointMagic);
  for (const auto& e : entries) {
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put_u32(out, 4);
    for (auto d : e.tensor.shape().dims) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : e.tensor.values()) detail::put_f64(out, v);
  }
  return out;
}

/// Shapes of rank < 4 are promoted by prepending singleton dims.
inline std::vector<NamedTensor> decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.take(std::min(bytes.size(), kCheckpointMagic.size()), "magic") != kCheckpointMagic)
    throw ParseError("checkpoint magic mismatch", 0);
  std::vector<NamedTensor> out;
  while (!r.done()) {
    const std::size_t start = r.pos();
    const std::uint32_t len = r.u32("name length");
    std::string name(r.take(len, "name"));
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 4) throw ParseError("unsupported rank " + std::to_string(rank) + " for " + name, start);
    Shape s;
    for (std::uint32_t i = 0; i < rank; ++i) s.dims[4 - rank + i] = r.u32("dims");
    for (auto d : s.dims)
      if (d == 0) throw ParseError("zero dimension in " + name, start);
    std::vector<double> values(static_cast<std::size_t>(s.numel()));
    for (auto& v : values) v = r.f64("values");
    out.push_back({std::move(name), Tensor::from(s, std::move(values))});
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& entries) {
  detail::write_file(path, encode_checkpoint(entries));
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file(path));
}

inline std::map<std::string, Tensor> checkpoint_map(const std::vector<NamedTensor>& entries) {
  std::map<std::string, Tensor> m;
  for (const auto& e : entries) m.emplace(e.name, e.tensor);
  return m;
}

}  // namespace medfe
