#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ecenet/tensor_io.hpp"
#include "ecenet/model.hpp"

// Checkpoint files: magic "ECEN", u32 version (1), u32 step, u32 parameter
// count, then per parameter: u16 name length, name bytes, u8 rank, rank x u32
// extents, f32 data. Optimizer moments follow as a u32 count and entries in
// the same layout. A u64 config hash closes the file. All little-endian.

namespace ecenet {

struct NamedTensor {
  std::string name;
  Tensor<float> value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
  std::uint32_t step = 0;
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> moments;
  std::uint64_t config_hash = 0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr std::array<char, 4> kCheckpointMagic{'E', 'C', 'E', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_entries(std::ostream& os, const std::vector<NamedTensor>& entries) {
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw ContractError("checkpoint: parameter name too long");
    if (e.value.rank() > 255) throw ContractError("checkpoint: rank exceeds 255");
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(e.value.rank()));
    for (auto d : e.value.shape()) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    io::write_f32_payload(os, e.value.data());
  }
}

inline std::vector<NamedTensor> read_entries(std::istream& is, std::uint32_t count) {
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    e.name.resize(io::read_le<std::uint16_t>(is));
    is.read(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    if (!is) throw DataError("checkpoint: truncated name");
    const auto rank = io::read_le<std::uint8_t>(is);
    if (rank == 0) throw DataError("checkpoint: " + e.name + " has rank 0");
    Shape shape(rank);
    for (auto& d : shape) {
      d = io::read_le<std::uint32_t>(is);
      if (d == 0) throw DataError("checkpoint: " + e.name + " has a zero extent");
    }
    e.value = Tensor<float>(shape, io::read_f32_payload(is, shape_numel(shape)));
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write(kCheckpointMagic.data(), 4);
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  io::write_le<std::uint32_t>(os, ck.step);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.params.size()));
  detail::write_entries(os, ck.params);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.moments.size()));
  detail::write_entries(os, ck.moments);
  io::write_le<std::uint64_t>(os, ck.config_hash);
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || magic != kCheckpointMagic) throw DataError("not a checkpoint (bad magic)");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.step = io::read_le<std::uint32_t>(is);
  ck.params = detail::read_entries(is, io::read_le<std::uint32_t>(is));
  ck.moments = detail::read_entries(is, io::read_le<std::uint32_t>(is));
  ck.config_hash = io::read_le<std::uint64_t>(is);
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_checkpoint(os, ck);
  if (!os) throw DataError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_checkpoint(is);
}

/// Parameter table of a model, in visit order, as 32-bit floats.
template <typename T>
std::vector<NamedTensor> capture_parameters(ECENet<T>& model) {
  std::vector<NamedTensor> out;
  model.visit([&](Parameter<T>& p) { out.push_back({p.name, p.value.template cast<float>()}); });
  return out;
}

/// Loads values by name. The table must cover exactly the model's parameters
/// with matching shapes.
template <typename T>
void restore_parameters(ECENet<T>& model, const std::vector<NamedTensor>& table) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& e : table) {
    if (!by_name.emplace(e.name, &e.value).second) throw DataError("checkpoint: duplicate parameter " + e.name);
  }
  std::size_t used = 0;
  model.visit([&](Parameter<T>& p) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("checkpoint: missing parameter " + p.name);
    if (it->second->shape() != p.value.shape()) {
      throw DataError("checkpoint: " + p.name + " has shape " + shape_str(it->second->shape()) + ", model expects " +
                      shape_str(p.value.shape()));
    }
    if constexpr (std::is_same_v<T, float>) {
      p.value = *it->second;
    } else {
      p.value = it->second->template cast<T>();
    }
    ++used;
  });
  if (used != by_name.size()) throw DataError("checkpoint: contains parameters the model does not have");
}

}  // namespace ecenet
