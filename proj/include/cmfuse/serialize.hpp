#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmfuse/tensor.hpp"

// Binary record IO. All integers are little-endian; floats are the IEEE-754
// bit pattern of a double, little-endian.

namespace cmfuse {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

inline void write_f64(std::ostream& out, double v) {
  write_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline std::uint32_t read_u32(std::istream& in) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  if (in.gcount() != 4) throw std::runtime_error("read_u32: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (in.gcount() != 8) throw std::runtime_error("read_u64: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

inline void write_blob(std::ostream& out, const std::string& blob) {
  write_u64(out, blob.size());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline std::string read_blob(std::istream& in) {
  const std::uint64_t len = read_u64(in);
  std::string blob(len, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(len));
  if (static_cast<std::uint64_t>(in.gcount()) != len) {
    throw std::runtime_error("read_blob: truncated file");
  }
  return blob;
}

// Tensor record: name length + name + rank + dims (u64 LE) + raw f64 data.
struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

inline void write_record(std::ostream& out, const std::string& name, const Shape& shape,
                         const std::vector<double>& data) {
  write_blob(out, name);
  write_u64(out, shape.size());
  for (std::size_t d : shape) write_u64(out, d);
  for (double v : data) write_f64(out, v);
}

inline TensorRecord read_record(std::istream& in) {
  TensorRecord rec;
  rec.name = read_blob(in);
  const std::uint64_t rank = read_u64(in);
  if (rank > 8) throw std::runtime_error("read_record: implausible rank in record " + rec.name);
  rec.shape.resize(rank);
  for (std::uint64_t i = 0; i < rank; ++i) rec.shape[i] = read_u64(in);
  const std::size_t numel = shape_numel(rec.shape);
  rec.data.resize(numel);
  for (std::size_t i = 0; i < numel; ++i) rec.data[i] = read_f64(in);
  return rec;
}

}  // namespace cmfuse
