// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint, all integers and floats little-endian:
//
//   "BTXF" u32 version
//   config   i32 vocab, d_model, n_layers, n_heads, d_ff, max_seq_len; f64 rms_eps
//   u64 step; str rng_state
//   u8 has_moe [u32 N; u8 method; i32 k; f64 capacity, alpha, gumbel_rate;
//               u8 first_layer_soft; u8 usage; u32 count, str provenance...]
//   u8 has_optim [u64 optimizer step]
//   u32 count, tensors: str name; u32 rank; u64 dims...; f32 values...
//   u32 crc32 of every preceding byte
//
// where str is u32 length + bytes. Optimizer moments live in the tensor
// table as "optim.m/<param>" and "optim.v/<param>".
#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "btx/errors.hpp"
#include "btx/merge.hpp"
#include "btx/model.hpp"
#include "btx/moe_model.hpp"

namespace btx {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
  bool operator==(const NamedTensor&) const = default;
};

struct MoEMeta {
  std::uint32_t n_experts = 0;
  RouterConfig router;
  std::vector<std::string> provenance;
  bool operator==(const MoEMeta&) const = default;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  ModelConfig config;
  std::uint64_t step = 0;        // training steps taken so far
  std::string rng_state;         // serialized std::mt19937_64
  std::optional<MoEMeta> moe;
  std::optional<std::uint64_t> optim_step;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
  }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf_[pos_++])) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CorruptionError("checkpoint ends unexpectedly");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw("BTXF", 4);
  w.u32(ck.version);
  const ModelConfig& c = ck.config;
  for (int v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq_len}) w.i32(v);
  w.f64(c.rms_eps);
  w.u64(ck.step);
  w.str(ck.rng_state);
  w.u8(ck.moe ? 1 : 0);
  if (ck.moe) {
    const MoEMeta& m = *ck.moe;
    w.u32(m.n_experts);
    w.u8(static_cast<std::uint8_t>(m.router.method));
    w.i32(m.router.k);
    w.f64(m.router.capacity_factor);
    w.f64(m.router.alpha);
    w.f64(m.router.gumbel_rate);
    w.u8(m.router.first_layer_soft ? 1 : 0);
    w.u8(static_cast<std::uint8_t>(m.router.usage));
    w.u32(static_cast<std::uint32_t>(m.provenance.size()));
    for (const auto& p : m.provenance) w.str(p);
  }
  w.u8(ck.optim_step ? 1 : 0);
  if (ck.optim_step) w.u64(*ck.optim_step);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    if (shape_numel(t.shape) != t.values.size()) throw ContractError("tensor '" + t.name + "' shape/data mismatch");
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.u64(d);
    for (float v : t.values) w.f32(v);
  }
  std::string bytes = w.bytes();
  const std::uint32_t crc = detail::crc32_of(bytes.data(), bytes.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>(static_cast<std::uint8_t>(crc >> (8 * i))));
  return bytes;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, "BTXF") != 0) throw CorruptionError("not a checkpoint (bad magic or too short)");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[body + i])) << (8 * i);
  if (stored != detail::crc32_of(bytes.data(), body)) throw CorruptionError("checkpoint checksum mismatch");

  detail::ByteReader r(bytes, body);
  for (int i = 0; i < 4; ++i) r.u8();
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != kCheckpointVersion)
    throw VersionError("checkpoint version " + std::to_string(ck.version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  ModelConfig& c = ck.config;
  c.vocab_size = r.i32();
  c.d_model = r.i32();
  c.n_layers = r.i32();
  c.n_heads = r.i32();
  c.d_ff = r.i32();
  c.max_seq_len = r.i32();
  c.rms_eps = r.f64();
  ck.step = r.u64();
  ck.rng_state = r.str();
  if (r.u8()) {
    MoEMeta m;
    m.n_experts = r.u32();
    const std::uint8_t method = r.u8();
    if (method > 3) throw CorruptionError("unknown routing method tag");
    m.router.method = static_cast<RoutingMethod>(method);
    m.router.k = r.i32();
    m.router.capacity_factor = r.f64();
    m.router.alpha = r.f64();
    m.router.gumbel_rate = r.f64();
    m.router.first_layer_soft = r.u8() != 0;
    const std::uint8_t usage = r.u8();
    if (usage > 1) throw CorruptionError("unknown usage statistic tag");
    m.router.usage = static_cast<UsageStat>(usage);
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) m.provenance.push_back(r.str());
    ck.moe = std::move(m);
  }
  if (r.u8()) ck.optim_step = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str();
    const std::uint32_t rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(static_cast<std::size_t>(r.u64()));
    const std::size_t n = shape_numel(t.shape);
    if (n > bytes.size()) throw CorruptionError("tensor '" + t.name + "' larger than file");
    t.values.resize(n);
    for (float& v : t.values) v = r.f32();
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw CorruptionError("trailing bytes after tensor table");
  return ck;
}

// Written to a sibling temp file and renamed into place.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

// ---- model <-> checkpoint ----

template <typename Model>
void append_tensors(Checkpoint& ck, const Model& model) {
  model.visit([&](const std::string& name, const auto& p) {
    ck.tensors.push_back({name, p.shape, std::vector<float>(p.value.begin(), p.value.end())});
  });
}

template <typename Model>
void fill_from_tensors(Model& model, const Checkpoint& ck) {
  model.visit([&](const std::string& name, auto& p) {
    const NamedTensor* t = ck.find(name);
    if (t == nullptr) throw CorruptionError("checkpoint is missing tensor '" + name + "'");
    if (t->shape != p.shape)
      throw CorruptionError("tensor '" + name + "' has shape " + shape_str(t->shape) + ", expected " + shape_str(p.shape));
    p.value.assign(t->values.begin(), t->values.end());
  });
}

template <typename S>
Checkpoint to_checkpoint(const ModelParams<S>& params) {
  Checkpoint ck;
  ck.config = params.config;
  append_tensors(ck, params);
  return ck;
}

template <typename S>
Checkpoint to_checkpoint(const MoEModel<S>& moe) {
  Checkpoint ck;
  ck.config = moe.config;
  ck.moe = MoEMeta{static_cast<std::uint32_t>(moe.n_experts()), moe.router, moe.provenance};
  append_tensors(ck, moe);
  return ck;
}

template <typename S = float>
ModelParams<S> dense_from_checkpoint(const Checkpoint& ck) {
  if (ck.moe) throw ContractError("checkpoint holds an MoE model, expected a dense one");
  ModelParams<S> p = empty_params<S>(ck.config);
  fill_from_tensors(p, ck);
  return p;
}

template <typename S = float>
MoEModel<S> moe_from_checkpoint(const Checkpoint& ck) {
  if (!ck.moe) throw ContractError("checkpoint holds a dense model; routing needs an MoE checkpoint");
  const ModelParams<S> shell = empty_params<S>(ck.config);
  MoEModel<S> moe;
  moe.config = ck.config;
  moe.backbone = shell.backbone;
  moe.router = ck.moe->router;
  moe.provenance = ck.moe->provenance;
  const std::size_t n = ck.moe->n_experts;
  // Expert width can differ from d_ff after splitting; read it from the table.
  for (int l = 0; l < ck.config.n_layers; ++l) {
    MoELayerParams<S> layer;
    for (std::size_t e = 0; e < n; ++e) {
      const std::string base = "layers." + std::to_string(l) + ".moe.expert." + std::to_string(e) + ".";
      const NamedTensor* w1 = ck.find(base + "w1");
      if (w1 == nullptr || w1->shape.size() != 2) throw CorruptionError("checkpoint is missing tensor '" + base + "w1'");
      const std::size_t d = ck.config.d_model, h = w1->shape[1];
      layer.experts.push_back({Param<S>({d, h}), Param<S>({d, h}), Param<S>({h, d})});
    }
    layer.router = Param<S>({static_cast<std::size_t>(ck.config.d_model), n});
    moe.layers.push_back(std::move(layer));
  }
  fill_from_tensors(moe, ck);
  return moe;
}

}  // namespace btx
