#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "asvit/vit.hpp"

namespace asvit {

struct CheckpointError : Error {
  using Error::Error;
};

// File layout, all integers little-endian:
//   "ASVT" | u32 version | 8 x u32 model config | u32 tensor count
//   per tensor: u16 name length | name | u8 rank | rank x u32 extents | float32 values
// Model parameters come first in ViTWeights::named() order; optional extra tensors follow.

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

struct Checkpoint {
  ModelConfig config;
  NamedTensors tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace ckpt_detail {

template <class U>
void put(std::ostream& os, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class U>
U get(std::istream& is, const std::string& what) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = is.get();
    if (c == EOF) throw CheckpointError("checkpoint truncated while reading " + what);
    v |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

inline std::vector<std::uint32_t*> config_fields(ModelConfig& c) {
  return {&c.image_size, &c.patch_size, &c.in_channels, &c.embed_dim,
          &c.num_heads,  &c.num_layers, &c.mlp_ratio,   &c.num_classes};
}

}  // namespace ckpt_detail

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  using namespace ckpt_detail;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  os.write("ASVT", 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  ModelConfig cfg = ck.config;
  for (auto* f : config_fields(cfg)) put<std::uint32_t>(os, *f);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    if (name.size() > 0xffff) throw CheckpointError("tensor name too long: " + name);
    put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    for (float v : t.values()) put<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw CheckpointError("write failed for " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  using namespace ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "ASVT")
    throw CheckpointError(path.string() + " is not an ASVT checkpoint");
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  for (auto* f : config_fields(ck.config)) *f = get<std::uint32_t>(is, "model config");
  const auto count = get<std::uint32_t>(is, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get<std::uint16_t>(is, "name length"), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size())))
      throw CheckpointError("checkpoint truncated in tensor name");
    Shape shape(get<std::uint8_t>(is, "rank"));
    for (auto& e : shape) e = get<std::uint32_t>(is, "extent of " + name);
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = std::bit_cast<float>(get<std::uint32_t>(is, "values of " + name));
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

/// Checkpoint holding the model parameters plus `extra` tensors.
inline Checkpoint checkpoint_of(const ViTWeights<float>& w, NamedTensors extra = {}) {
  Checkpoint ck{w.cfg, {}};
  for (const auto& [name, v] : w.named()) ck.tensors.emplace_back(name, v->value());
  for (auto& e : extra) ck.tensors.push_back(std::move(e));
  return ck;
}

/// Rebuilds model weights, checking every expected parameter's presence and shape.
inline ViTWeights<float> weights_from(const Checkpoint& ck) {
  try {
    ck.config.validate();
  } catch (const Error& e) {
    throw CheckpointError(std::string("checkpoint model config invalid: ") + e.what());
  }
  auto w = ViTWeights<float>::zeros(ck.config);
  const auto shapes = ViTWeights<float>::shapes(ck.config);
  auto named = w.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    const Tensor<float>* t = ck.find(named[i].first);
    if (!t) throw CheckpointError("checkpoint is missing parameter " + named[i].first);
    if (t->shape() != shapes[i])
      throw CheckpointError("parameter " + named[i].first + " has shape " + shape_str(t->shape()) + ", expected " +
                            shape_str(shapes[i]));
    *named[i].second = Var<float>::param(*t);
  }
  return w;
}

}  // namespace asvit
