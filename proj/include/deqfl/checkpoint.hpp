#pragma once

// Model checkpoint, binary, all integers and floats little-endian:
//
//   offset  size  field
//   0       8     magic "DEQFLCK1"
//   8       4     d_z       (uint32)
//   12      4     d_x       (uint32)
//   16      4     classes   (uint32)
//   20      4     activation (uint32: 0 tanh, 1 relu, 2 identity)
//   24      8*n   IEEE-754 binary64 values: W, U, b, head_W, head_b,
//                 each row-major, n = d_z^2 + d_z*d_x + d_z + C*d_z + C
//
// Solver settings are not part of the checkpoint.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "deqfl/errors.hpp"
#include "deqfl/model.hpp"

namespace deqfl {

namespace detail {

inline constexpr std::array<char, 8> kCheckpointMagic = {'D', 'E', 'Q', 'F', 'L', 'C', 'K', '1'};

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_f64(std::vector<unsigned char>& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline double get_f64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

inline std::uint32_t activation_code(Activation a) {
  switch (a) {
    case Activation::tanh: return 0;
    case Activation::relu: return 1;
    case Activation::identity: return 2;
  }
  return 0;
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const DeqClassifier& m) {
  m.validate();
  std::vector<unsigned char> out(detail::kCheckpointMagic.begin(), detail::kCheckpointMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(m.deq.d_z()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.deq.d_x()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.classes()));
  detail::put_u32(out, detail::activation_code(m.deq.activation));
  for (double v : flatten(m)) detail::put_f64(out, v);
  return out;
}

inline DeqClassifier decode_checkpoint(const std::vector<unsigned char>& bytes, const SolverConfig& solver = {}) {
  constexpr std::size_t kHeader = 24;
  if (bytes.size() < kHeader) throw TruncatedFileError("checkpoint: header truncated");
  if (std::memcmp(bytes.data(), detail::kCheckpointMagic.data(), 8) != 0) throw BadMagicError("checkpoint: bad magic");
  const std::size_t d_z = detail::get_u32(bytes.data() + 8);
  const std::size_t d_x = detail::get_u32(bytes.data() + 12);
  const std::size_t classes = detail::get_u32(bytes.data() + 16);
  const std::uint32_t act = detail::get_u32(bytes.data() + 20);
  if (act > 2) throw DataError("checkpoint: unknown activation code " + std::to_string(act));
  if (d_z == 0 || d_x == 0 || classes == 0) throw DataError("checkpoint: zero dimension");

  const std::size_t n = count_params(d_z, d_x, classes).total();
  if (bytes.size() != kHeader + 8 * n)
    throw TruncatedFileError("checkpoint: expected " + std::to_string(kHeader + 8 * n) + " bytes, found " +
                             std::to_string(bytes.size()));
  DeqClassifier m{DeqParams{Matrix(d_z, d_z), Matrix(d_z, d_x), Vector(d_z),
                            act == 0 ? Activation::tanh : act == 1 ? Activation::relu : Activation::identity},
                  Matrix(classes, d_z), Vector(classes), solver};
  std::vector<double> flat(n);
  for (std::size_t i = 0; i < n; ++i) flat[i] = detail::get_f64(bytes.data() + kHeader + 8 * i);
  unflatten_into(m, flat);
  return m;
}

inline void save_checkpoint(const DeqClassifier& m, const std::string& path) {
  const auto bytes = encode_checkpoint(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("checkpoint: cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("checkpoint: write failed for '" + path + "'");
}

inline DeqClassifier load_checkpoint(const std::string& path, const SolverConfig& solver = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, solver);
}

}  // namespace deqfl
