#pragma once

#include <bit>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "probtf/nn.hpp"
#include "probtf/optim.hpp"
#include "probtf/synthdata.hpp"

// Binary checkpoint container: magic "PBTF", format version, then named
// sections. Parameters are stored as (name, shape, little-endian f32 data);
// other sections carry optimizer moments, constraint-controller scalars and
// progress counters. Serialization is fully explicit byte-by-byte, so a
// checkpoint written, loaded and written again is byte-identical.

namespace probtf {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'P', 'B', 'T', 'F'};

namespace bytes {

inline void put_u8(std::string& out, std::uint8_t v) {
  out.push_back(static_cast<char>(v));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

inline void put_f64(std::string& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

class Reader {
 public:
  Reader(const std::string& data, std::string context)
      : data_(data), context_(std::move(context)) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i]))
           << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i]))
           << (8 * i);
    }
    pos_ += 8;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string str(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

  void expect_end() const {
    if (pos_ != data_.size()) {
      throw std::runtime_error(context_ + ": trailing bytes after offset " +
                               std::to_string(pos_));
    }
  }

 private:
  void need(std::size_t n) {
    if (pos_ + n > data_.size()) {
      throw std::runtime_error(context_ + ": truncated at byte " + std::to_string(pos_));
    }
  }

  const std::string& data_;
  std::string context_;
  std::size_t pos_ = 0;
};

}  // namespace bytes

struct CheckpointSection {
  std::string name;
  std::string payload;
};

inline std::string checkpoint_container_to_string(
    const std::vector<CheckpointSection>& sections) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  bytes::put_u32(out, kCheckpointVersion);
  bytes::put_u32(out, static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) {
    bytes::put_u32(out, static_cast<std::uint32_t>(s.name.size()));
    out += s.name;
    bytes::put_u64(out, s.payload.size());
    out += s.payload;
  }
  return out;
}

inline std::vector<CheckpointSection> checkpoint_container_from_string(
    const std::string& data) {
  bytes::Reader r(data, "checkpoint");
  if (r.str(4) != std::string(kCheckpointMagic, 4)) {
    throw std::runtime_error("checkpoint: bad magic, not a checkpoint file");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(version) + ", expected " +
                             std::to_string(kCheckpointVersion));
  }
  const std::uint32_t count = r.u32();
  std::vector<CheckpointSection> sections;
  sections.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointSection s;
    s.name = r.str(r.u32());
    const std::uint64_t len = r.u64();
    s.payload = r.str(static_cast<std::size_t>(len));
    sections.push_back(std::move(s));
  }
  r.expect_end();
  return sections;
}

inline const CheckpointSection* find_section(
    const std::vector<CheckpointSection>& sections, const std::string& name) {
  for (const auto& s : sections) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

inline const CheckpointSection& require_section(
    const std::vector<CheckpointSection>& sections, const std::string& name) {
  const CheckpointSection* s = find_section(sections, name);
  if (s == nullptr) throw std::runtime_error("checkpoint: missing section " + name);
  return *s;
}

// Parameter payload: u32 tensor count, then per tensor
// (u32 name length, name, u32 rank, u64 dims, f32 values).
template <typename T>
std::string serialize_params(const ParamBank<T>& bank) {
  std::string out;
  bytes::put_u32(out, static_cast<std::uint32_t>(bank.size()));
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const std::string& name = bank.name(i);
    const Tensor<T>& t = bank.tensor(i);
    bytes::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    bytes::put_u32(out, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) bytes::put_u64(out, d);
    for (T v : t.values()) bytes::put_f32(out, static_cast<float>(v));
  }
  return out;
}

// Restores values into an already-built bank. Any difference in tensor
// count, names, or shapes means the stored model does not match the
// requested configuration.
template <typename T>
void deserialize_params(ParamBank<T>& bank, const std::string& payload,
                        const std::string& label) {
  bytes::Reader r(payload, "checkpoint section " + label);
  const std::uint32_t count = r.u32();
  if (count != bank.size()) {
    throw std::runtime_error("checkpoint config mismatch: section " + label + " holds " +
                             std::to_string(count) + " tensors, model expects " +
                             std::to_string(bank.size()));
  }
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const std::string name = r.str(r.u32());
    if (name != bank.name(i)) {
      throw std::runtime_error("checkpoint config mismatch: section " + label +
                               " tensor " + std::to_string(i) + " is named " + name +
                               ", model expects " + bank.name(i));
    }
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<std::size_t>(r.u64());
    Tensor<T>& t = bank.tensor(i);
    if (shape != t.shape()) {
      throw std::runtime_error("checkpoint config mismatch: parameter " + name +
                               " has a different shape than the model expects");
    }
    auto& values = t.values_mut();
    for (std::size_t j = 0; j < values.size(); ++j) values[j] = static_cast<T>(r.f32());
  }
  r.expect_end();
}

// Optimizer payload: u64 step count, u32 slot count, then per slot
// (u64 value count, f32 first moments, f32 second moments).
template <typename T>
std::string serialize_optimizer(AdamW<T>& opt) {
  std::string out;
  bytes::put_u64(out, opt.steps_taken());
  const auto& m = opt.moment1();
  const auto& v = opt.moment2();
  bytes::put_u32(out, static_cast<std::uint32_t>(m.size()));
  for (std::size_t i = 0; i < m.size(); ++i) {
    bytes::put_u64(out, m[i].size());
    for (T x : m[i]) bytes::put_f32(out, static_cast<float>(x));
    for (T x : v[i]) bytes::put_f32(out, static_cast<float>(x));
  }
  return out;
}

template <typename T>
void deserialize_optimizer(AdamW<T>& opt, const std::string& payload) {
  bytes::Reader r(payload, "checkpoint section optim");
  const std::uint64_t t = r.u64();
  auto& m = opt.moment1();
  auto& v = opt.moment2();
  const std::uint32_t slots = r.u32();
  if (slots != m.size()) {
    throw std::runtime_error(
        "checkpoint config mismatch: optimizer state covers " + std::to_string(slots) +
        " tensors, model expects " + std::to_string(m.size()));
  }
  for (std::size_t i = 0; i < m.size(); ++i) {
    const std::uint64_t n = r.u64();
    if (n != m[i].size()) {
      throw std::runtime_error("checkpoint config mismatch: optimizer slot " +
                               std::to_string(i) + " size differs");
    }
    for (std::size_t j = 0; j < m[i].size(); ++j) m[i][j] = static_cast<T>(r.f32());
    for (std::size_t j = 0; j < v[i].size(); ++j) v[i][j] = static_cast<T>(r.f32());
  }
  r.expect_end();
  opt.restore_step_count(static_cast<std::size_t>(t));
}

inline void save_checkpoint_file(const std::string& path,
                                 const std::vector<CheckpointSection>& sections) {
  write_file(path, checkpoint_container_to_string(sections));
}

inline std::vector<CheckpointSection> load_checkpoint_file(const std::string& path) {
  return checkpoint_container_from_string(read_file(path));
}

}  // namespace probtf
