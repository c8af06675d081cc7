// SPDX-License-Identifier: Apache-2.0
//
// Binary decode traces ("FKVT"). All integers are little-endian u32.
//
//   magic "FKVT" | version | n_layers | n_qo | n_kv | d | elem_kind
//   | prefill_len | n_steps
//   prefill: for each layer, K[prefill_len][n_kv][d] then V[prefill_len][n_kv][d]
//   steps:   for each step, for each layer, q[n_qo][d] k[n_kv][d] v[n_kv][d]
//
// elem_kind 0 stores IEEE binary32, 1 stores IEEE binary16. q and k are taken
// to be post-position-embedding; nothing downstream applies RoPE.

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "freekv/core.hpp"

namespace freekv {

inline constexpr std::uint32_t kTraceVersion = 1;

enum class ElemKind : std::uint32_t { F32 = 0, F16 = 1 };

inline std::uint16_t float_to_half(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  const std::uint32_t raw_exp = (x >> 23) & 0xffu;
  std::uint32_t mant = x & 0x7fffffu;
  if (raw_exp == 0xffu) return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));
  const std::int32_t exp = static_cast<std::int32_t>(raw_exp) - 127 + 15;
  if (exp >= 31) return static_cast<std::uint16_t>(sign | 0x7c00u);
  if (exp <= 0) {
    if (exp < -10) return static_cast<std::uint16_t>(sign);
    mant |= 0x800000u;
    const std::uint32_t shift = static_cast<std::uint32_t>(14 - exp);
    std::uint32_t half_mant = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1u);
    if (rem > halfway || (rem == halfway && (half_mant & 1u))) ++half_mant;
    return static_cast<std::uint16_t>(sign | half_mant);
  }
  std::uint32_t half = sign | (static_cast<std::uint32_t>(exp) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;
  return static_cast<std::uint16_t>(half);
}

inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  const std::uint32_t mant = h & 0x3ffu;
  if (exp == 0) {
    const float mag = std::ldexp(static_cast<float>(mant), -24);
    return sign ? -mag : mag;
  }
  if (exp == 31) return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
  return std::bit_cast<float>(sign | ((exp - 15 + 127) << 23) | (mant << 13));
}

struct TraceHeader {
  std::uint32_t version = kTraceVersion;
  std::uint32_t n_layers = 0;
  std::uint32_t n_qo = 0;
  std::uint32_t n_kv = 0;
  std::uint32_t head_dim = 0;
  ElemKind elem_kind = ElemKind::F32;
  std::uint32_t prefill_len = 0;
  std::uint32_t n_steps = 0;

  bool operator==(const TraceHeader&) const = default;
};

class Trace {
 public:
  Trace() = default;
  explicit Trace(const TraceHeader& header) : header_(header) {
    const std::size_t layers = header.n_layers;
    prefill_k_.resize(layers * header.prefill_len * kv_row());
    prefill_v_.resize(prefill_k_.size());
    q_.resize(static_cast<std::size_t>(header.n_steps) * layers * q_row());
    k_.resize(static_cast<std::size_t>(header.n_steps) * layers * kv_row());
    v_.resize(k_.size());
  }

  const TraceHeader& header() const { return header_; }
  std::size_t layers() const { return header_.n_layers; }
  std::size_t steps() const { return header_.n_steps; }
  std::size_t prefill_len() const { return header_.prefill_len; }
  std::size_t q_row() const { return static_cast<std::size_t>(header_.n_qo) * header_.head_dim; }
  std::size_t kv_row() const { return static_cast<std::size_t>(header_.n_kv) * header_.head_dim; }
  /// Tokens in context while decoding `step`, the step's own token included.
  std::size_t context_at(std::size_t step) const { return prefill_len() + step + 1; }

  ModelDims dims(std::size_t page_size, std::size_t elem_bytes = 4) const {
    return {header_.n_qo, header_.n_kv, header_.head_dim, page_size, elem_bytes};
  }

  std::span<float> prefill_keys(std::size_t layer) { return slice(prefill_k_, layer, prefill_len() * kv_row()); }
  std::span<float> prefill_values(std::size_t layer) { return slice(prefill_v_, layer, prefill_len() * kv_row()); }
  std::span<const float> prefill_keys(std::size_t layer) const { return cslice(prefill_k_, layer, prefill_len() * kv_row()); }
  std::span<const float> prefill_values(std::size_t layer) const {
    return cslice(prefill_v_, layer, prefill_len() * kv_row());
  }

  std::span<float> query(std::size_t step, std::size_t layer) { return slice(q_, step * layers() + layer, q_row()); }
  std::span<float> key(std::size_t step, std::size_t layer) { return slice(k_, step * layers() + layer, kv_row()); }
  std::span<float> value(std::size_t step, std::size_t layer) { return slice(v_, step * layers() + layer, kv_row()); }
  std::span<const float> query(std::size_t step, std::size_t layer) const {
    return cslice(q_, step * layers() + layer, q_row());
  }
  std::span<const float> key(std::size_t step, std::size_t layer) const {
    return cslice(k_, step * layers() + layer, kv_row());
  }
  std::span<const float> value(std::size_t step, std::size_t layer) const {
    return cslice(v_, step * layers() + layer, kv_row());
  }

  /// Key of token `pos` (prefill or decoded) for KV head `kv_head`.
  std::span<const float> token_key(std::size_t layer, std::size_t pos, std::size_t kv_head) const {
    const std::size_t d = header_.head_dim;
    if (pos < prefill_len()) return prefill_keys(layer).subspan(pos * kv_row() + kv_head * d, d);
    return key(pos - prefill_len(), layer).subspan(kv_head * d, d);
  }
  std::span<const float> token_value(std::size_t layer, std::size_t pos, std::size_t kv_head) const {
    const std::size_t d = header_.head_dim;
    if (pos < prefill_len()) return prefill_values(layer).subspan(pos * kv_row() + kv_head * d, d);
    return value(pos - prefill_len(), layer).subspan(kv_head * d, d);
  }

  bool operator==(const Trace&) const = default;

 private:
  static std::span<float> slice(std::vector<float>& v, std::size_t index, std::size_t len) {
    return std::span<float>(v).subspan(index * len, len);
  }
  static std::span<const float> cslice(const std::vector<float>& v, std::size_t index, std::size_t len) {
    return std::span<const float>(v).subspan(index * len, len);
  }

  TraceHeader header_;
  std::vector<float> prefill_k_;
  std::vector<float> prefill_v_;
  std::vector<float> q_;
  std::vector<float> k_;
  std::vector<float> v_;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}

inline void put_elems(std::vector<std::uint8_t>& out, std::span<const float> values, ElemKind kind) {
  for (float f : values) {
    if (kind == ElemKind::F32) {
      put_u32(out, std::bit_cast<std::uint32_t>(f));
    } else {
      const std::uint16_t h = float_to_half(f);
      out.push_back(static_cast<std::uint8_t>(h));
      out.push_back(static_cast<std::uint8_t>(h >> 8));
    }
  }
}

inline std::size_t get_elems(std::span<const std::uint8_t> in, std::size_t at, std::span<float> values,
                             ElemKind kind) {
  for (auto& f : values) {
    if (kind == ElemKind::F32) {
      f = std::bit_cast<float>(get_u32(in, at));
      at += 4;
    } else {
      f = half_to_float(static_cast<std::uint16_t>(in[at] | (in[at + 1] << 8)));
      at += 2;
    }
  }
  return at;
}

}  // namespace detail

inline constexpr std::size_t kTraceHeaderBytes = 4 + 8 * 4;

inline std::vector<std::uint8_t> encode_trace(const Trace& trace) {
  const auto& h = trace.header();
  std::vector<std::uint8_t> out{'F', 'K', 'V', 'T'};
  for (auto v : {h.version, h.n_layers, h.n_qo, h.n_kv, h.head_dim, static_cast<std::uint32_t>(h.elem_kind),
                 h.prefill_len, h.n_steps}) {
    detail::put_u32(out, v);
  }
  for (std::size_t l = 0; l < trace.layers(); ++l) {
    detail::put_elems(out, trace.prefill_keys(l), h.elem_kind);
    detail::put_elems(out, trace.prefill_values(l), h.elem_kind);
  }
  for (std::size_t s = 0; s < trace.steps(); ++s) {
    for (std::size_t l = 0; l < trace.layers(); ++l) {
      detail::put_elems(out, trace.query(s, l), h.elem_kind);
      detail::put_elems(out, trace.key(s, l), h.elem_kind);
      detail::put_elems(out, trace.value(s, l), h.elem_kind);
    }
  }
  return out;
}

/// Parses and validates a trace; any inconsistency is TraceCorrupt.
inline Trace decode_trace(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kTraceHeaderBytes) throw Error(ErrorCode::TraceCorrupt, "truncated header");
  if (std::memcmp(bytes.data(), "FKVT", 4) != 0) throw Error(ErrorCode::TraceCorrupt, "bad magic");
  TraceHeader h;
  h.version = detail::get_u32(bytes, 4);
  if (h.version != kTraceVersion) {
    throw Error(ErrorCode::TraceCorrupt, "unsupported version " + std::to_string(h.version));
  }
  h.n_layers = detail::get_u32(bytes, 8);
  h.n_qo = detail::get_u32(bytes, 12);
  h.n_kv = detail::get_u32(bytes, 16);
  h.head_dim = detail::get_u32(bytes, 20);
  const std::uint32_t kind = detail::get_u32(bytes, 24);
  h.prefill_len = detail::get_u32(bytes, 28);
  h.n_steps = detail::get_u32(bytes, 32);

  if (kind > 1) throw Error(ErrorCode::TraceCorrupt, "unknown elem_kind " + std::to_string(kind));
  h.elem_kind = static_cast<ElemKind>(kind);
  if (h.n_layers == 0 || h.n_qo == 0 || h.n_kv == 0 || h.head_dim == 0) {
    throw Error(ErrorCode::TraceCorrupt, "zero dimension in header");
  }
  if (h.n_qo % h.n_kv != 0) throw Error(ErrorCode::TraceCorrupt, "n_qo not divisible by n_kv");

  const std::uint64_t eb = h.elem_kind == ElemKind::F32 ? 4 : 2;
  const std::uint64_t kv_row = std::uint64_t{h.n_kv} * h.head_dim;
  const std::uint64_t q_row = std::uint64_t{h.n_qo} * h.head_dim;
  const std::uint64_t elems = std::uint64_t{h.n_layers} * (2 * std::uint64_t{h.prefill_len} * kv_row) +
                              std::uint64_t{h.n_steps} * h.n_layers * (q_row + 2 * kv_row);
  if (bytes.size() != kTraceHeaderBytes + elems * eb) {
    throw Error(ErrorCode::TraceCorrupt, "payload length " + std::to_string(bytes.size() - kTraceHeaderBytes) +
                                             " does not match declared counts (" + std::to_string(elems * eb) + ")");
  }

  Trace trace(h);
  std::size_t at = kTraceHeaderBytes;
  for (std::size_t l = 0; l < trace.layers(); ++l) {
    at = detail::get_elems(bytes, at, trace.prefill_keys(l), h.elem_kind);
    at = detail::get_elems(bytes, at, trace.prefill_values(l), h.elem_kind);
  }
  for (std::size_t s = 0; s < trace.steps(); ++s) {
    for (std::size_t l = 0; l < trace.layers(); ++l) {
      at = detail::get_elems(bytes, at, trace.query(s, l), h.elem_kind);
      at = detail::get_elems(bytes, at, trace.key(s, l), h.elem_kind);
      at = detail::get_elems(bytes, at, trace.value(s, l), h.elem_kind);
    }
  }
  return trace;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::TraceCorrupt, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Trace read_trace(const std::string& path) { return decode_trace(read_file_bytes(path)); }

inline void write_trace(const std::string& path, const Trace& trace) {
  const auto bytes = encode_trace(trace);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::TraceCorrupt, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// 64-bit FNV-1a, used to fingerprint traces and outputs in reports.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::span<const float> values) {
  return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(values.data()),
                                               values.size() * sizeof(float)));
}

}  // namespace freekv
