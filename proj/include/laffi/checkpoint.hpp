#pragma once

// Versioned binary container for model weights and LoRA adapters.
//
//   magic     8 bytes  "LAFFICKP"
//   version   u32      kCheckpointVersion
//   kind      u32      0 = model weights, 1 = adapters
//   config    u32 ×6   n_layers, n_heads, d_model, d_ff, vocab_size, max_seq_len
//             u64      init_seed
//   count     u32      number of tensors
//   tensor    u32 name length, name bytes, u32 ndim, u32 dims[ndim],
//             (adapters only) u32 layer, u8 projection ('q'|'k'|'v'), u32 rank, f64 alpha,
//             raw f32 values
//
// All integers and floats are little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "laffi/errors.hpp"
#include "laffi/lora.hpp"
#include "laffi/model.hpp"

namespace laffi {

inline constexpr char kCheckpointMagic[8] = {'L', 'A', 'F', 'F', 'I', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint32_t { Model = 0, Adapters = 1 };

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}
  const char* bytes(std::size_t n) {
    if (pos_ + n > in_.size()) throw ParseError("checkpoint: truncated at byte " + std::to_string(pos_));
    const char* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(*bytes(1)); }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{u8()} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{u8()} << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  bool done() const { return pos_ == in_.size(); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

inline void write_header(ByteWriter& w, CheckpointKind kind, const ModelConfig& c, std::size_t count) {
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(kind));
  for (int v : {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_seq_len})
    w.u32(static_cast<std::uint32_t>(v));
  w.u64(c.init_seed);
  w.u32(static_cast<std::uint32_t>(count));
}

inline std::uint32_t read_header(ByteReader& r, CheckpointKind expected, ModelConfig& c) {
  if (std::memcmp(r.bytes(8), kCheckpointMagic, 8) != 0) throw ParseError("checkpoint: bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint: unsupported format version " + std::to_string(version));
  const auto kind = r.u32();
  if (kind != static_cast<std::uint32_t>(expected))
    throw ParseError("checkpoint: expected kind " + std::to_string(static_cast<std::uint32_t>(expected)) +
                     ", found " + std::to_string(kind));
  c.n_layers = static_cast<int>(r.u32());
  c.n_heads = static_cast<int>(r.u32());
  c.d_model = static_cast<int>(r.u32());
  c.d_ff = static_cast<int>(r.u32());
  c.vocab_size = static_cast<int>(r.u32());
  c.max_seq_len = static_cast<int>(r.u32());
  c.init_seed = r.u64();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
  return r.u32();
}

inline void write_tensor_body(ByteWriter& w, const Tensor& t) {
  for (const float v : t.data()) w.f32(v);
}

inline void write_name_shape(ByteWriter& w, const std::string& name, const Shape& shape) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (const auto d : shape) w.u32(static_cast<std::uint32_t>(d));
}

inline std::pair<std::string, Shape> read_name_shape(ByteReader& r) {
  const auto len = r.u32();
  std::string name(r.bytes(len), len);
  const auto nd = r.u32();
  Shape shape(nd);
  for (auto& d : shape) d = r.u32();
  return {std::move(name), std::move(shape)};
}

inline Tensor read_tensor_body(ByteReader& r, Shape shape) {
  // Reject corrupt dims before allocating.
  const std::size_t n = shape_numel(shape);
  if (n > r.remaining() / 4) throw ParseError("checkpoint: tensor " + shape_str(shape) + " exceeds file size");
  std::vector<float> v(n);
  for (auto& x : v) x = r.f32();
  return Tensor(std::move(shape), std::move(v));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

inline std::string serialize_weights(const TransformerWeights& w) {
  detail::ByteWriter out;
  const auto named = w.named_tensors();
  detail::write_header(out, CheckpointKind::Model, w.config, named.size());
  for (const auto& [name, t] : named) {
    detail::write_name_shape(out, name, t.shape());
    detail::write_tensor_body(out, t);
  }
  return out.take();
}

inline TransformerWeights deserialize_weights(std::string_view bytes) {
  detail::ByteReader in(bytes);
  ModelConfig config;
  const auto count = detail::read_header(in, CheckpointKind::Model, config);
  // Build a skeleton with the right names/shapes, then fill it.
  TransformerWeights w = init_model<float>(config);
  auto named = w.named_tensors();
  if (count != named.size()) {
    throw ParseError("checkpoint: expected " + std::to_string(named.size()) + " tensors, found " +
                     std::to_string(count));
  }
  for (auto& [name, t] : named) {
    auto [got_name, shape] = detail::read_name_shape(in);
    if (got_name != name || shape != t.shape()) {
      throw ParseError("checkpoint: tensor '" + got_name + "' " + shape_str(shape) +
                       " where '" + name + "' " + shape_str(t.shape()) + " was expected");
    }
    auto loaded = detail::read_tensor_body(in, shape);
    std::copy(loaded.data().begin(), loaded.data().end(), t.mutable_data().begin());
  }
  if (!in.done()) throw ParseError("checkpoint: trailing bytes after last tensor");
  return w;
}

inline void save_weights(const std::filesystem::path& path, const TransformerWeights& w) {
  detail::write_file(path, serialize_weights(w));
}

inline TransformerWeights load_weights(const std::filesystem::path& path) {
  return deserialize_weights(detail::read_file(path));
}

struct AdapterCheckpoint {
  ModelConfig config;
  AdapterSet adapters;
};

inline std::string serialize_adapters(const ModelConfig& config, const AdapterSet& adapters) {
  detail::ByteWriter out;
  detail::write_header(out, CheckpointKind::Adapters, config, adapters.size() * 2);
  for (const auto& ad : adapters) {
    const std::string base = "layers." + std::to_string(ad.layer) + "." +
                             projection_letter(ad.projection) + "_proj.lora_";
    for (const auto& [suffix, t] : {std::pair{"a", ad.a}, std::pair{"b", ad.b}}) {
      detail::write_name_shape(out, base + suffix, t.shape());
      out.u32(static_cast<std::uint32_t>(ad.layer));
      out.u8(static_cast<std::uint8_t>(projection_letter(ad.projection)));
      out.u32(static_cast<std::uint32_t>(ad.rank));
      out.f64(ad.alpha);
      detail::write_tensor_body(out, t);
    }
  }
  return out.take();
}

inline AdapterCheckpoint deserialize_adapters(std::string_view bytes) {
  detail::ByteReader in(bytes);
  AdapterCheckpoint ck;
  const auto count = detail::read_header(in, CheckpointKind::Adapters, ck.config);
  if (count % 2 != 0) throw ParseError("checkpoint: adapter tensors must come in A/B pairs");
  for (std::uint32_t i = 0; i < count; i += 2) {
    LoraAdapter ad;
    for (int half = 0; half < 2; ++half) {
      auto [name, shape] = detail::read_name_shape(in);
      const auto layer = static_cast<int>(in.u32());
      const char proj = static_cast<char>(in.u8());
      const auto rank = static_cast<int>(in.u32());
      const double alpha = in.f64();
      auto t = detail::read_tensor_body(in, shape);
      t.set_requires_grad(true);
      ad.layer = layer;
      if (proj != 'q' && proj != 'k' && proj != 'v')
        throw ParseError("checkpoint: bad projection tag in '" + name + "'");
      ad.projection = parse_projection(std::string(1, proj));
      ad.rank = rank;
      ad.alpha = alpha;
      const bool is_a = name.ends_with("lora_a");
      if (is_a == (half == 1)) throw ParseError("checkpoint: adapter pair out of order at '" + name + "'");
      (is_a ? ad.a : ad.b) = t;
    }
    if (ad.layer < 0 || ad.layer >= ck.config.n_layers)
      throw ParseError("checkpoint: adapter layer " + std::to_string(ad.layer) + " out of range");
    ck.adapters.push_back(std::move(ad));
  }
  if (!in.done()) throw ParseError("checkpoint: trailing bytes after last tensor");
  return ck;
}

inline void save_adapters(const std::filesystem::path& path, const ModelConfig& config,
                          const AdapterSet& adapters) {
  detail::write_file(path, serialize_adapters(config, adapters));
}

inline AdapterCheckpoint load_adapters(const std::filesystem::path& path) {
  return deserialize_adapters(detail::read_file(path));
}

}  // namespace laffi
