// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint container:
//
//   "DMCK" | u32 version | u64 json_length | json bytes (UTF-8)
//   then, until end of file, per tensor:
//   u32 name_length | name bytes | u32 rank | u64 dims[rank] | f32 payload
//
// All integers and floats are little-endian; payloads are row-major.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "defmod/error.hpp"
#include "defmod/tensor.hpp"

namespace defmod {

inline constexpr std::array<char, 4> kCheckpointMagic{'D', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    raise<FormatVersionError>("checkpoint has no tensor '", name, "'");
  }
  bool has_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return true;
    }
    return false;
  }
};

namespace detail {

template <typename U>
void put_le(std::ostream& out, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& in, const char* what) {
  unsigned char buf[sizeof(U)];
  in.read(reinterpret_cast<char*>(buf), sizeof(U));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(U))) raise<FormatVersionError>("checkpoint truncated in ", what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_le<std::uint32_t>(out, ck.version);
  const std::string meta = ck.metadata.dump();
  detail::put_le<std::uint64_t>(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  for (const auto& [name, t] : ck.tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (float v : t.data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) raise<IoError>("failed writing checkpoint");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4 || magic != kCheckpointMagic) raise<FormatVersionError>("not a checkpoint (bad magic bytes)");
  Checkpoint ck;
  ck.version = detail::get_le<std::uint32_t>(in, "version");
  if (ck.version != kCheckpointVersion) {
    raise<FormatVersionError>("checkpoint format version ", ck.version, " is not supported (expected ",
                              kCheckpointVersion, ")");
  }
  const auto meta_len = detail::get_le<std::uint64_t>(in, "metadata length");
  std::string meta(meta_len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(meta_len));
  if (static_cast<std::uint64_t>(in.gcount()) != meta_len) raise<FormatVersionError>("checkpoint truncated in metadata");
  try {
    ck.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    raise<FormatVersionError>("checkpoint metadata is not valid JSON: ", e.what());
  }
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto name_len = detail::get_le<std::uint32_t>(in, "tensor name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len)) raise<FormatVersionError>("checkpoint truncated in tensor name");
    const auto rank = detail::get_le<std::uint32_t>(in, "tensor rank");
    if (rank == 0 || rank > 8) raise<FormatVersionError>("tensor '", name, "' has invalid rank ", rank);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_le<std::uint64_t>(in, "tensor dims");
    std::vector<float> data(shape_size(shape));
    for (auto& v : data) v = std::bit_cast<float>(detail::get_le<std::uint32_t>(in, "tensor payload"));
    ck.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) raise<IoError>("cannot write checkpoint ", tmp);
    write_checkpoint(out, ck);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) raise<IoError>("cannot move checkpoint into ", path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise<IoError>("cannot open checkpoint ", path);
  return read_checkpoint(in);
}

}  // namespace defmod
