#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "kanmix/dataset.hpp"
#include "kanmix/errors.hpp"
#include "kanmix/mixer.hpp"

namespace kanmix {

// Checkpoint layout, all little-endian:
//   "KANMIX01"
//   config: u32 patch_size, n_channels, n_hiddens, depth, n_output, in_channels,
//           image_height, image_width; i32 spline_order, grid_size;
//           f32 grid_min, grid_max; u32 residual; u64 seed
//   layers in declaration order (embed, blocks..., head_norm, head):
//     KAN layer:  u32 in, u32 out, u32 order, u32 grid_size, f32 min, f32 max,
//                 f32 w[out*in], f32 c[out*in*(grid_size+order)]
//     layer norm: u32 dim, f32 gain[dim], f32 bias[dim]
//   Inside a block: [token_norm], token_in, token_out, [channel_norm],
//   channel_in, channel_out; the norms are present only in residual mode.
inline constexpr std::string_view kCheckpointMagic = "KANMIX01";

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) bytes_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void u64(std::uint64_t v) {
    for (int s = 0; s < 64; s += 8) bytes_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  template <typename Real>
  void reals(std::span<const Real> vs) {
    for (auto v : vs) f32(static_cast<float>(v));
  }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  template <typename Real>
  void reals(std::span<Real> out) {
    need(out.size() * 4);
    for (auto& v : out) v = static_cast<Real>(f32());
  }
  std::string_view raw(std::size_t n) {
    need(n);
    std::string_view s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw TruncatedFile("checkpoint ends early");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

template <typename Real>
void write_kan(ByteWriter& w, const KanLinear<Real>& layer) {
  w.u32(static_cast<std::uint32_t>(layer.in_features()));
  w.u32(static_cast<std::uint32_t>(layer.out_features()));
  w.u32(static_cast<std::uint32_t>(layer.grid().order()));
  w.u32(static_cast<std::uint32_t>(layer.grid().grid_size()));
  w.f32(static_cast<float>(layer.grid().x_min()));
  w.f32(static_cast<float>(layer.grid().x_max()));
  w.reals<Real>(layer.weight().data());
  w.reals<Real>(layer.coeffs().data());
}

template <typename Real>
void read_kan(ByteReader& r, KanLinear<Real>& layer) {
  const std::uint32_t in = r.u32(), out = r.u32(), order = r.u32(), gsize = r.u32();
  const float lo = r.f32(), hi = r.f32();
  if (in != layer.in_features() || out != layer.out_features() ||
      order != static_cast<std::uint32_t>(layer.grid().order()) ||
      gsize != static_cast<std::uint32_t>(layer.grid().grid_size()) ||
      lo != static_cast<float>(layer.grid().x_min()) ||
      hi != static_cast<float>(layer.grid().x_max())) {
    throw BadMagic("checkpoint layer header does not match its configuration");
  }
  r.reals<Real>(layer.weight().data());
  r.reals<Real>(layer.coeffs().data());
}

template <typename Real>
void write_norm(ByteWriter& w, const LayerNorm<Real>& n) {
  w.u32(static_cast<std::uint32_t>(n.dim()));
  w.reals<Real>(n.gain().data());
  w.reals<Real>(n.bias().data());
}

template <typename Real>
void read_norm(ByteReader& r, LayerNorm<Real>& n) {
  if (r.u32() != n.dim()) throw BadMagic("checkpoint layer-norm size does not match");
  r.reals<Real>(n.gain().data());
  r.reals<Real>(n.bias().data());
}

}  // namespace detail

template <typename Real>
std::vector<std::uint8_t> serialize_model(KanMixer<Real>& model) {
  detail::ByteWriter w;
  const auto& c = model.config();
  w.raw(kCheckpointMagic);
  for (std::size_t v : {c.patch_size, c.n_channels, c.n_hiddens, c.depth, c.n_output,
                        c.in_channels, c.image_height, c.image_width}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.i32(c.spline_order);
  w.i32(c.grid_size);
  w.f32(static_cast<float>(c.grid_min));
  w.f32(static_cast<float>(c.grid_max));
  w.u32(c.residual ? 1u : 0u);
  w.u64(c.seed);
  detail::write_kan(w, model.embed());
  for (auto& b : model.blocks()) {
    if (b.token_norm()) detail::write_norm(w, *b.token_norm());
    detail::write_kan(w, b.token_in());
    detail::write_kan(w, b.token_out());
    if (b.channel_norm()) detail::write_norm(w, *b.channel_norm());
    detail::write_kan(w, b.channel_in());
    detail::write_kan(w, b.channel_out());
  }
  detail::write_norm(w, model.head_norm());
  detail::write_kan(w, model.head());
  return std::move(w.bytes());
}

template <typename Real>
KanMixer<Real> deserialize_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kCheckpointMagic.size() ||
      std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw BadMagic("not a KANMIX01 checkpoint");
  }
  detail::ByteReader r(bytes);
  r.raw(kCheckpointMagic.size());
  MixerConfig c;
  c.patch_size = r.u32();
  c.n_channels = r.u32();
  c.n_hiddens = r.u32();
  c.depth = r.u32();
  c.n_output = r.u32();
  c.in_channels = r.u32();
  c.image_height = r.u32();
  c.image_width = r.u32();
  c.spline_order = r.i32();
  c.grid_size = r.i32();
  c.grid_min = r.f32();
  c.grid_max = r.f32();
  c.residual = r.u32() != 0;
  c.seed = r.u64();
  try {
    c.validate();
  } catch (const Error& e) {
    throw BadMagic(std::string("checkpoint carries an invalid configuration: ") + e.what());
  }
  KanMixer<Real> model(c);
  detail::read_kan(r, model.embed());
  for (auto& b : model.blocks()) {
    if (b.token_norm()) detail::read_norm(r, *b.token_norm());
    detail::read_kan(r, b.token_in());
    detail::read_kan(r, b.token_out());
    if (b.channel_norm()) detail::read_norm(r, *b.channel_norm());
    detail::read_kan(r, b.channel_in());
    detail::read_kan(r, b.channel_out());
  }
  detail::read_norm(r, model.head_norm());
  detail::read_kan(r, model.head());
  if (!r.done()) throw BadMagic("checkpoint has trailing bytes");
  return model;
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FileError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw FileError("cannot rename " + tmp.string() + ": " + ec.message());
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span<const std::uint8_t>(
                              reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, KanMixer<Real>& model) {
  write_file_atomic(path, serialize_model(model));
}

template <typename Real>
KanMixer<Real> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_model<Real>(detail::read_bytes(path));
}

}  // namespace kanmix
