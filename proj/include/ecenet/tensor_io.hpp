#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "ecenet/tensor.hpp"

// "TNSR" raw tensor files: magic, u8 version (1), u8 rank, rank x u32 extents,
// then the payload as little-endian 32-bit floats.

namespace ecenet {

namespace io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename U>
void write_le(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw DataError("unexpected end of file");
  return v;
}

inline void write_f32_payload(std::ostream& os, std::span<const float> data) {
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
}

inline std::vector<float> read_f32_payload(std::istream& is, std::size_t n) {
  std::vector<float> out(n);
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!is) throw DataError("truncated float payload");
  return out;
}

}  // namespace io

inline constexpr std::array<char, 4> kTensorMagic{'T', 'N', 'S', 'R'};
inline constexpr std::uint8_t kTensorVersion = 1;

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (t.rank() > 255) throw ContractError("write_tensor: rank exceeds 255");
  os.write(kTensorMagic.data(), 4);
  io::write_le<std::uint8_t>(os, kTensorVersion);
  io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  const Tensor<float> f = t.template cast<float>();
  io::write_f32_payload(os, f.data());
}

template <typename T = float>
Tensor<T> read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || magic != kTensorMagic) throw DataError("not a TNSR file (bad magic)");
  const auto version = io::read_le<std::uint8_t>(is);
  if (version != kTensorVersion) throw DataError("unsupported TNSR version " + std::to_string(version));
  const auto rank = io::read_le<std::uint8_t>(is);
  if (rank == 0) throw DataError("TNSR rank must be positive");
  Shape shape(rank);
  for (auto& e : shape) {
    e = io::read_le<std::uint32_t>(is);
    if (e == 0) throw DataError("TNSR extent of zero");
  }
  Tensor<float> f(shape, io::read_f32_payload(is, shape_numel(shape)));
  if constexpr (std::is_same_v<T, float>) {
    return f;
  } else {
    return f.template cast<T>();
  }
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_tensor(os, t);
  if (!os) throw DataError("write failed: " + path);
}

template <typename T = float>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_tensor<T>(is);
}

}  // namespace ecenet
