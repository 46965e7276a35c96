#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "biomass/fusion.hpp"
#include "biomass/tensor.hpp"

// Flat key -> array checkpoint container. Little-endian IEEE payload, exact
// round-trip of the stored scalar type.

namespace biomass {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'B', 'M', 'C', 'K'};

namespace detail_ckpt {

template <class V>
void write_pod(std::ofstream& f, const V& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class V>
V read_pod(std::ifstream& f) {
  V v{};
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw IoError("truncated checkpoint");
  return v;
}

}  // namespace detail_ckpt

template <class T>
void save_checkpoint(const std::string& path, const NamedParams<T>& params) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint '" + path + "'");
  f.write(kCheckpointMagic, 4);
  detail_ckpt::write_pod(f, kCheckpointVersion);
  detail_ckpt::write_pod(f, static_cast<std::uint8_t>(sizeof(T)));
  detail_ckpt::write_pod(f, static_cast<std::uint64_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail_ckpt::write_pod(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail_ckpt::write_pod(f, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) detail_ckpt::write_pod(f, static_cast<std::uint64_t>(d));
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(T)));
  }
  if (!f) throw IoError("failed writing checkpoint '" + path + "'");
}

// Loads values into an existing parameter set; names, order, shapes and
// scalar width must all match.
template <class T>
void load_checkpoint(const std::string& path, NamedParams<T>& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw IoError("'" + path + "' is not a checkpoint file");
  }
  const auto version = detail_ckpt::read_pod<std::uint32_t>(f);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto scalar = detail_ckpt::read_pod<std::uint8_t>(f);
  if (scalar != sizeof(T)) {
    throw ConfigError("checkpoint precision (" + std::to_string(scalar * 8) +
                      "-bit) does not match the model");
  }
  const auto count = detail_ckpt::read_pod<std::uint64_t>(f);
  if (count != params.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(count) + " entries, model has " +
                      std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    const auto name_len = detail_ckpt::read_pod<std::uint32_t>(f);
    std::string stored(name_len, '\0');
    f.read(stored.data(), name_len);
    if (stored != name) {
      throw ConfigError("checkpoint entry '" + stored + "' does not match parameter '" + name +
                        "'");
    }
    const auto ndim = detail_ckpt::read_pod<std::uint32_t>(f);
    Shape shape(ndim);
    for (auto& d : shape) d = detail_ckpt::read_pod<std::uint64_t>(f);
    if (shape != t.shape()) {
      throw ShapeError("checkpoint shape mismatch for '" + name + "'");
    }
    f.read(reinterpret_cast<char*>(t.data_mut().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(T)));
    if (!f) throw IoError("truncated checkpoint payload for '" + name + "'");
  }
}

// In-memory weight snapshots (early stopping keeps the best epoch).
template <class T>
std::vector<std::vector<T>> snapshot_values(const NamedParams<T>& params) {
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

template <class T>
void restore_values(NamedParams<T>& params, const std::vector<std::vector<T>>& snapshot) {
  if (snapshot.size() != params.size()) throw ConfigError("snapshot/parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].second.data_mut();
    if (dst.size() != snapshot[i].size()) throw ShapeError("snapshot shape mismatch");
    std::copy(snapshot[i].begin(), snapshot[i].end(), dst.begin());
  }
}

}  // namespace biomass
