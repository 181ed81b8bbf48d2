#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "gradprom/models.hpp"

namespace gradprom {

// Checkpoint = <prefix>.json (versioned manifest: model config + parameter
// names/shapes/offsets) + <prefix>.bin (the raw parameter values as
// little-endian 64-bit floats, concatenated in ParameterSet order).
// Round trips are bit-exact.

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void write_doubles_le(std::ofstream& os, std::span<const double> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(double)));
  } else {
    for (double v : values) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      char buf[8];
      for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
      os.write(buf, 8);
    }
  }
}

inline std::vector<double> read_doubles_le(std::ifstream& is, std::size_t count) {
  std::vector<double> out(count);
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(out.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      char buf[8];
      is.read(buf, 8);
      std::uint64_t bits = 0;
      for (int j = 0; j < 8; ++j) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[j])) << (8 * j);
      }
      std::memcpy(&out[i], &bits, sizeof(double));
    }
  }
  if (!is) throw std::runtime_error("checkpoint: truncated .bin file");
  return out;
}

inline nlohmann::json model_config_json(const ModelConfig& cfg) {
  return nlohmann::json{{"role", role_name(cfg.role)},   {"channels", cfg.channels},
                        {"depth", cfg.depth},            {"in_channels", cfg.in_channels},
                        {"num_classes", cfg.num_classes}, {"sr_factor", cfg.sr_factor}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.role = role_from_name(j.at("role").get<std::string>());
  cfg.channels = j.at("channels").get<int>();
  cfg.depth = j.at("depth").get<int>();
  cfg.in_channels = j.at("in_channels").get<int>();
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.sr_factor = j.at("sr_factor").get<int>();
  return cfg;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& prefix, const ModelConfig& cfg,
                            const ParameterSet& params) {
  nlohmann::json manifest;
  manifest["format"] = "gradprom-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["model"] = detail::model_config_json(cfg);
  nlohmann::json plist = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : params.items) {
    plist.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
  }
  manifest["params"] = plist;
  manifest["total"] = offset;

  std::filesystem::path jpath = prefix;
  jpath += ".json";
  std::ofstream jf(jpath);
  if (!jf) throw std::runtime_error("checkpoint: cannot write " + jpath.string());
  jf << manifest.dump(2) << '\n';

  std::filesystem::path bpath = prefix;
  bpath += ".bin";
  std::ofstream bf(bpath, std::ios::binary);
  if (!bf) throw std::runtime_error("checkpoint: cannot write " + bpath.string());
  for (const auto& [name, t] : params.items) detail::write_doubles_le(bf, t.data());
}

inline std::pair<ModelConfig, ParameterSet> load_checkpoint(const std::filesystem::path& prefix) {
  std::filesystem::path jpath = prefix;
  jpath += ".json";
  std::ifstream jf(jpath);
  if (!jf) throw std::runtime_error("checkpoint: cannot read " + jpath.string());
  nlohmann::json manifest = nlohmann::json::parse(jf);
  if (manifest.at("format").get<std::string>() != "gradprom-checkpoint" ||
      manifest.at("version").get<int>() != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported manifest format/version");
  }
  ModelConfig cfg = detail::model_config_from_json(manifest.at("model"));

  std::filesystem::path bpath = prefix;
  bpath += ".bin";
  std::ifstream bf(bpath, std::ios::binary);
  if (!bf) throw std::runtime_error("checkpoint: cannot read " + bpath.string());

  ParameterSet params;
  for (const auto& entry : manifest.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    auto values = detail::read_doubles_le(bf, shape_numel(shape));
    params.items.emplace_back(name, Tensor(std::move(shape), std::move(values)));
  }
  return {cfg, std::move(params)};
}

}  // namespace gradprom
