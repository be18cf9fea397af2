#pragma once

// Binary model image:
//
//   offset  size  field
//   0       4     magic "HDN1"
//   4       4     version (u32, currently 1)
//   8       4     input_dim (u32)
//   12      4     hidden_dim (u32)
//   16      4     num_layers (u32)
//   20      4     output_dim (u32)
//   24      4     architecture (u32: 0 plain, 1 highway)
//   28      4     gate flags (u32: bit0 transform, bit1 carry, bit2 constrained)
//   32      8     parameter count (u64), must equal param_count(config)
//   40      ...   parameters as f64, in for_each_array order, row-major
//
// All integers and floats are little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "hdnn/errors.hpp"
#include "hdnn/network.hpp"

namespace hdnn {

inline constexpr std::array<char, 4> kModelMagic{'H', 'D', 'N', '1'};
inline constexpr std::uint32_t kModelVersion = 1;
inline constexpr std::size_t kModelHeaderBytes = 40;

struct LoadedModel {
  Parameters params;
  ModelConfig config;
};

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint64_t get_uint(const std::vector<unsigned char>& in, std::size_t offset, int bytes) {
  if (offset + static_cast<std::size_t>(bytes) > in.size()) throw FormatError("model file truncated", in.size());
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in[offset + i]) << (8 * i);
  return v;
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > UINT32_MAX) throw ConfigError(std::string(what) + " does not fit the model header");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

inline std::vector<unsigned char> encode_model(const Parameters& params, const ModelConfig& config) {
  check_structure(params, config);
  std::vector<unsigned char> out(kModelMagic.begin(), kModelMagic.end());
  detail::put_u32(out, kModelVersion);
  detail::put_u32(out, detail::checked_u32(config.input_dim, "input_dim"));
  detail::put_u32(out, detail::checked_u32(config.hidden_dim, "hidden_dim"));
  detail::put_u32(out, detail::checked_u32(config.num_layers, "num_layers"));
  detail::put_u32(out, detail::checked_u32(config.output_dim, "output_dim"));
  detail::put_u32(out, static_cast<std::uint32_t>(config.architecture));
  detail::put_u32(out, (config.gate.transform_enabled ? 1u : 0u) | (config.gate.carry_enabled ? 2u : 0u) |
                           (config.gate.constrained ? 4u : 0u));
  detail::put_u64(out, param_count(config));
  out.reserve(out.size() + 8 * element_count(params));
  for_each_array(params, [&](ParamGroup, const Matrix& m) {
    for (double v : m.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  });
  return out;
}

inline LoadedModel decode_model(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < kModelMagic.size() || std::memcmp(bytes.data(), kModelMagic.data(), kModelMagic.size()) != 0) {
    throw FormatError("bad model magic", 0);
  }
  const auto version = detail::get_uint(bytes, 4, 4);
  if (version != kModelVersion) throw FormatError("unsupported model version " + std::to_string(version), 4);

  ModelConfig config;
  config.input_dim = detail::get_uint(bytes, 8, 4);
  config.hidden_dim = detail::get_uint(bytes, 12, 4);
  config.num_layers = detail::get_uint(bytes, 16, 4);
  config.output_dim = detail::get_uint(bytes, 20, 4);
  const auto arch = detail::get_uint(bytes, 24, 4);
  if (arch > 1) throw FormatError("unknown architecture code " + std::to_string(arch), 24);
  config.architecture = static_cast<Architecture>(arch);
  const auto flags = detail::get_uint(bytes, 28, 4);
  if (flags > 7) throw FormatError("unknown gate flags " + std::to_string(flags), 28);
  config.gate = {(flags & 1u) != 0, (flags & 2u) != 0, (flags & 4u) != 0};
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid model config: ") + e.what(), 8);
  }

  const auto stored_count = detail::get_uint(bytes, 32, 8);
  if (stored_count != param_count(config)) {
    throw FormatError("header parameter count " + std::to_string(stored_count) + " does not match config (" +
                          std::to_string(param_count(config)) + ")",
                      32);
  }
  const std::size_t expected_size = kModelHeaderBytes + 8 * stored_count;
  if (bytes.size() < expected_size) throw FormatError("model file truncated", bytes.size());
  if (bytes.size() > expected_size) throw FormatError("trailing bytes after parameters", expected_size);

  LoadedModel model{zero_parameters(config), config};
  std::size_t offset = kModelHeaderBytes;
  for_each_array(model.params, [&](ParamGroup, Matrix& m) {
    for (double& v : m.values()) {
      v = std::bit_cast<double>(detail::get_uint(bytes, offset, 8));
      offset += 8;
    }
  });
  return model;
}

inline void save_model(const Parameters& params, const ModelConfig& config, const std::filesystem::path& path) {
  const auto bytes = encode_model(params, config);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

inline LoadedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_model(bytes);
}

}  // namespace hdnn
