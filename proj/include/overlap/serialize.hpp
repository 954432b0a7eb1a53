#ifndef OVERLAP_SERIALIZE_HPP
#define OVERLAP_SERIALIZE_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "overlap/common.hpp"
#include "overlap/tensor.hpp"

namespace overlap {

// Binary tensor container shared by model checkpoints and adversarial
// batches: magic "OVLB1", a length-prefixed UTF-8 JSON descriptor, then for
// each tensor: name length + bytes, rank, dims, raw float32 values. All
// integers are 64-bit little-endian; floats are little-endian IEEE-754.
inline constexpr char kContainerMagic[5] = {'O', 'V', 'L', 'B', '1'};

namespace detail {

inline void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(std::istream& in, const std::string& what) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw FormatError("truncated container while reading " + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f32_le(std::ostream& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline float read_f32_le(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw FormatError("truncated container while reading " + what);
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace detail

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline void write_container(const std::string& path, const std::string& descriptor_json,
                            const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out.write(kContainerMagic, 5);
  detail::write_u64_le(out, descriptor_json.size());
  out.write(descriptor_json.data(), static_cast<std::streamsize>(descriptor_json.size()));
  for (const NamedTensor& nt : tensors) {
    detail::write_u64_le(out, nt.name.size());
    out.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    detail::write_u64_le(out, nt.tensor.shape().size());
    for (std::size_t d : nt.tensor.shape()) detail::write_u64_le(out, d);
    for (float v : nt.tensor.values()) detail::write_f32_le(out, v);
  }
  if (!out) throw FormatError("write failed for " + path);
}

struct Container {
  std::string descriptor_json;
  std::vector<NamedTensor> tensors;
};

inline Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  char magic[5];
  in.read(magic, 5);
  if (!in || std::memcmp(magic, kContainerMagic, 5) != 0) {
    throw FormatError(path + ": bad container magic, expected OVLB1");
  }
  Container c;
  const std::uint64_t dlen = detail::read_u64_le(in, "descriptor length");
  c.descriptor_json.resize(dlen);
  in.read(c.descriptor_json.data(), static_cast<std::streamsize>(dlen));
  if (!in) throw FormatError(path + ": truncated descriptor");
  while (in.peek() != std::char_traits<char>::eof()) {
    NamedTensor nt;
    const std::uint64_t nlen = detail::read_u64_le(in, "tensor name length");
    nt.name.resize(nlen);
    in.read(nt.name.data(), static_cast<std::streamsize>(nlen));
    if (!in) throw FormatError(path + ": truncated tensor name");
    const std::uint64_t rank = detail::read_u64_le(in, "tensor rank");
    std::vector<std::size_t> shape(rank);
    for (std::uint64_t i = 0; i < rank; ++i) {
      shape[i] = static_cast<std::size_t>(detail::read_u64_le(in, "tensor dim"));
    }
    const std::size_t count = Tensor::element_count(shape);
    std::vector<float> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = detail::read_f32_le(in, "tensor values");
    nt.tensor = Tensor::from_values(std::move(shape), std::move(values));
    c.tensors.push_back(std::move(nt));
  }
  return c;
}

}  // namespace overlap

#endif  // OVERLAP_SERIALIZE_HPP
