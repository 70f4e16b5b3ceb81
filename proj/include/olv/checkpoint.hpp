#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "olv/io.hpp"
#include "olv/network.hpp"
#include "olv/preprocess.hpp"

namespace olv {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'O', 'L', 'V', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& path) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error(ErrorKind::Checkpoint, "truncated checkpoint", path);
  return v;
}

inline void write_block(std::ostream& os, const std::string& name,
                        const std::vector<float>& data, std::uint32_t rows,
                        std::uint32_t cols) {
  write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod<std::uint32_t>(os, rows);
  write_pod<std::uint32_t>(os, cols);
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(float)));
}

struct RawBlock {
  std::string name;
  std::uint32_t rows = 0, cols = 0;
  std::vector<float> data;
};

inline RawBlock read_block(std::istream& is, const std::string& path) {
  RawBlock b;
  const auto name_len = read_pod<std::uint16_t>(is, path);
  b.name.resize(name_len);
  is.read(b.name.data(), name_len);
  if (!is) throw Error(ErrorKind::Checkpoint, "truncated checkpoint", path);
  b.rows = read_pod<std::uint32_t>(is, path);
  b.cols = read_pod<std::uint32_t>(is, path);
  const std::size_t count = static_cast<std::size_t>(b.rows) * b.cols;
  b.data.resize(count);
  is.read(reinterpret_cast<char*>(b.data.data()),
          static_cast<std::streamsize>(count * sizeof(float)));
  if (!is) throw Error(ErrorKind::Checkpoint, "truncated checkpoint", path);
  return b;
}

}  // namespace detail

// Versioned binary container: magic, version, producing config (JSON), then
// named float32 parameter blocks plus the normalizer statistics.
template <typename S>
void save_checkpoint(const std::string& path, const Model<S>& model, const NormStats& stats) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Checkpoint, "cannot write checkpoint", path);
  os.write(kCheckpointMagic, 4);
  detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
  const std::string cfg = config_to_json(model.config()).dump();
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  const auto& p = model.params();
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.blocks().size()) + 2);
  for (std::size_t i = 0; i < p.blocks().size(); ++i) {
    const auto& blk = p.blocks()[i];
    const auto v = p.vec(static_cast<int>(i));
    std::vector<float> data(static_cast<std::size_t>(v.size()));
    for (Eigen::Index k = 0; k < v.size(); ++k) data[k] = static_cast<float>(v[k]);
    detail::write_block(os, blk.name, data, static_cast<std::uint32_t>(blk.rows),
                        static_cast<std::uint32_t>(blk.cols));
  }
  std::vector<float> means(kNumChannels), stds(kNumChannels);
  for (int c = 0; c < kNumChannels; ++c) {
    means[c] = static_cast<float>(stats[c].mean);
    stds[c] = static_cast<float>(stats[c].std);
  }
  detail::write_block(os, "norm.mean", means, kNumChannels, 1);
  detail::write_block(os, "norm.std", stds, kNumChannels, 1);
  if (!os) throw Error(ErrorKind::Checkpoint, "write failure", path);
}

template <typename S>
struct LoadedModel {
  Model<S> model;
  NormStats stats;
};

template <typename S = float>
LoadedModel<S> load_checkpoint(const std::string& path,
                               const ModelConfig* expected_config = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Checkpoint, "cannot open checkpoint", path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw Error(ErrorKind::Checkpoint, "bad magic; not a checkpoint file", path);
  const auto version = detail::read_pod<std::uint32_t>(is, path);
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::Checkpoint,
                "unsupported checkpoint version " + std::to_string(version), path);
  const auto cfg_len = detail::read_pod<std::uint32_t>(is, path);
  std::string cfg_str(cfg_len, '\0');
  is.read(cfg_str.data(), cfg_len);
  if (!is) throw Error(ErrorKind::Checkpoint, "truncated checkpoint", path);
  ModelConfig cfg;
  try {
    cfg = config_from_json(json::parse(cfg_str));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Checkpoint, "corrupt embedded config: " + std::string(e.what()), path);
  }
  if (expected_config) {
    if (cfg.l_ws != expected_config->l_ws)
      throw Error(ErrorKind::Checkpoint,
                  "config mismatch: checkpoint l_ws=" + std::to_string(cfg.l_ws) +
                      ", expected " + std::to_string(expected_config->l_ws),
                  path);
    if (cfg.encoder_kind != expected_config->encoder_kind)
      throw Error(ErrorKind::Checkpoint, "config mismatch: encoder_kind differs", path);
  }

  LoadedModel<S> out{Model<S>(cfg), NormStats{}};
  const auto n_blocks = detail::read_pod<std::uint32_t>(is, path);
  auto& p = out.model.params();
  std::vector<bool> seen(p.blocks().size(), false);
  bool have_mean = false, have_std = false;
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    const auto raw = detail::read_block(is, path);
    if (raw.name == "norm.mean" || raw.name == "norm.std") {
      if (raw.rows != kNumChannels || raw.cols != 1)
        throw Error(ErrorKind::Checkpoint, "bad normalizer block shape", path);
      for (int c = 0; c < kNumChannels; ++c) {
        if (raw.name == "norm.mean") out.stats[c].mean = raw.data[c];
        else out.stats[c].std = raw.data[c];
      }
      (raw.name == "norm.mean" ? have_mean : have_std) = true;
      continue;
    }
    const auto id = p.find(raw.name);
    if (!id)
      throw Error(ErrorKind::Checkpoint, "unexpected parameter block " + raw.name, path);
    const auto& blk = p.blocks()[*id];
    if (blk.rows != raw.rows || blk.cols != raw.cols)
      throw Error(ErrorKind::Checkpoint, "shape mismatch for block " + raw.name, path);
    auto v = p.vec(*id);
    for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = static_cast<S>(raw.data[k]);
    seen[*id] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i])
      throw Error(ErrorKind::Checkpoint, "missing parameter block " + p.blocks()[i].name, path);
  }
  if (!have_mean || !have_std)
    throw Error(ErrorKind::Checkpoint, "missing normalizer statistics", path);
  return out;
}

}  // namespace olv
