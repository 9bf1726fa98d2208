#pragma once

// Checkpoint container: a version header followed by (name, shape, values)
// records with all integers and doubles stored little-endian.
//
//   magic   "GIGCKPT\0"            8 bytes
//   version u32                    (kCheckpointVersion)
//   count   u64
//   count x { u32 name_len, name bytes, u32 ndim, u64 dims[ndim],
//             f64 values[prod(dims)] }

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gig {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'G', 'I', 'G', 'C', 'K', 'P', 'T', '\0'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<double> values;

  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

namespace detail {

template <typename U>
void put_le(std::ostream& out, U v) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw CheckpointError("checkpoint truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const std::vector<NamedArray>& arrays) {
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, arrays.size());
  for (const auto& a : arrays) {
    std::uint64_t count = 1;
    for (auto d : a.shape) count *= d;
    if (count != a.values.size()) throw CheckpointError("checkpoint entry '" + a.name + "' shape/value mismatch");
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) detail::put_le<std::uint64_t>(out, d);
    for (double v : a.values) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw CheckpointError("checkpoint write failed");
}

inline std::vector<NamedArray> read_checkpoint(std::istream& in) {
  char magic[sizeof kCheckpointMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const auto version = detail::get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = detail::get_le<std::uint64_t>(in);
  std::vector<NamedArray> arrays;
  arrays.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t e = 0; e < count; ++e) {
    NamedArray a;
    a.name.resize(detail::get_le<std::uint32_t>(in));
    if (!in.read(a.name.data(), static_cast<std::streamsize>(a.name.size()))) throw CheckpointError("checkpoint truncated");
    const auto ndim = detail::get_le<std::uint32_t>(in);
    std::uint64_t n = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      a.shape.push_back(detail::get_le<std::uint64_t>(in));
      n *= a.shape.back();
    }
    a.values.resize(static_cast<std::size_t>(n));
    for (auto& v : a.values) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(in));
    arrays.push_back(std::move(a));
  }
  return arrays;
}

/// Writes beside the target and renames, so a killed process never leaves a torn file.
inline void save_checkpoint(const std::string& path, const std::vector<NamedArray>& arrays) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot open " + tmp + " for writing");
    write_checkpoint(out, arrays);
    out.flush();
    if (!out) throw CheckpointError("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot rename " + tmp + " to " + path);
}

inline std::vector<NamedArray> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace gig
