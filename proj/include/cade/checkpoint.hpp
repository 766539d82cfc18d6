// Flat binary parameter checkpoints.
//
// Layout (all integers little-endian):
//   "CADEW1"                      6 bytes magic
//   u64 tensor count
//   per tensor: u32 name length, name bytes, u32 rank, u64 dims[rank]
//   per tensor, in table order: IEEE-754 binary64 values, little-endian
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cade/autograd.hpp"

namespace cade {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const std::string& in, std::size_t& pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) throw CheckpointError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += static_cast<std::size_t>(bytes);
  return v;
}

}  // namespace detail

inline constexpr std::array<char, 6> kCheckpointMagic = {'C', 'A', 'D', 'E', 'W', '1'};

inline std::string encode_checkpoint(std::span<const ag::Parameter* const> params) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le(out, params.size(), 8);
  for (const auto* p : params) {
    detail::put_le(out, p->name.size(), 4);
    out += p->name;
    detail::put_le(out, 2, 4);
    detail::put_le(out, p->value.rows(), 8);
    detail::put_le(out, p->value.cols(), 8);
  }
  for (const auto* p : params) {
    for (double v : p->value.values()) detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  }
  return out;
}

// Loads values into params by name. Every parameter must be present in the
// blob with an identical shape; extra tensors in the blob are an error too.
inline void decode_checkpoint(const std::string& blob, std::span<ag::Parameter* const> params) {
  if (blob.size() < kCheckpointMagic.size() ||
      std::memcmp(blob.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw CheckpointError("not a CADEW1 checkpoint (bad magic)");
  }
  std::size_t pos = kCheckpointMagic.size();
  const auto count = detail::get_le(blob, pos, 8);
  struct Entry {
    std::string name;
    std::vector<std::uint64_t> dims;
  };
  std::vector<Entry> table;
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    const auto len = detail::get_le(blob, pos, 4);
    if (pos + len > blob.size()) throw CheckpointError("checkpoint truncated in name table");
    e.name = blob.substr(pos, len);
    pos += len;
    const auto rank = detail::get_le(blob, pos, 4);
    for (std::uint64_t r = 0; r < rank; ++r) e.dims.push_back(detail::get_le(blob, pos, 8));
    table.push_back(std::move(e));
  }
  if (table.size() != params.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(table.size()) +
                          " tensors, model expects " + std::to_string(params.size()));
  }
  for (const auto& e : table) {
    ag::Parameter* target = nullptr;
    for (auto* p : params) {
      if (p->name == e.name) target = p;
    }
    if (target == nullptr) throw CheckpointError("checkpoint tensor '" + e.name + "' unknown to model");
    std::uint64_t n = 1;
    for (auto d : e.dims) n *= d;
    const bool shape_ok = e.dims.size() == 2 && e.dims[0] == target->value.rows() &&
                          e.dims[1] == target->value.cols();
    if (!shape_ok) {
      throw CheckpointError("checkpoint tensor '" + e.name + "' shape mismatch, model has " +
                            target->value.shape_str());
    }
    for (std::uint64_t k = 0; k < n; ++k) {
      target->value[k] = std::bit_cast<double>(detail::get_le(blob, pos, 8));
    }
  }
  if (pos != blob.size()) throw CheckpointError("checkpoint has trailing bytes");
}

inline void save_checkpoint(const std::string& path, std::span<const ag::Parameter* const> params) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint for writing: " + path);
  const auto blob = encode_checkpoint(params);
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!f) throw CheckpointError("failed writing checkpoint: " + path);
}

inline void load_checkpoint(const std::string& path, std::span<ag::Parameter* const> params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint not found: " + path);
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  decode_checkpoint(blob, params);
}

}  // namespace cade
