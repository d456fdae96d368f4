// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmf/params.hpp"
#include "dmf/tensor.hpp"

// File layout: one JSON header line
//   {"shape":[...],"dtype":"f64","order":"row-major"}\n
// followed by numel() little-endian IEEE-754 doubles.

namespace dmf {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_le(std::ostream& os, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
  os.write(reinterpret_cast<const char*>(bytes), 8);
}

inline double get_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  nlohmann::json header;
  header["shape"] = std::vector<index_t>(t.shape().dims().begin(), t.shape().dims().end());
  header["dtype"] = "f64";
  header["order"] = "row-major";
  os << header.dump() << '\n';
  for (double v : t.data()) detail::put_le(os, v);
  if (!os) throw FormatError("write_tensor: stream failure");
}

inline Tensor read_tensor(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("read_tensor: missing header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("read_tensor: bad header: ") + e.what());
  }
  if (header.value("dtype", "") != "f64") throw FormatError("read_tensor: dtype must be f64");
  if (header.value("order", "") != "row-major") {
    throw FormatError("read_tensor: order must be row-major");
  }
  const auto dims = header.at("shape").get<std::vector<index_t>>();
  const Shape shape{std::span<const index_t>(dims)};
  const auto n = static_cast<std::size_t>(shape.numel());
  std::vector<unsigned char> raw(n * 8);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size()) {
    throw FormatError("read_tensor: truncated payload");
  }
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = detail::get_le(raw.data() + 8 * i);
  return Tensor(shape, std::move(values));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor(is);
}

/// Directory of tensor files plus manifest.json listing name, file and shape
/// for each parameter. `extra` is stored verbatim under "meta".
inline void save_params(const std::filesystem::path& dir, const ParamStore& params,
                        const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& [name, value] : params) {
    const std::string file = name + ".tensor";
    save_tensor(dir / file, value);
    manifest["tensors"].push_back(
        {{"name", name},
         {"file", file},
         {"shape", std::vector<index_t>(value.shape().dims().begin(), value.shape().dims().end())}});
  }
  manifest["meta"] = extra;
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("no manifest.json in " + dir.string());
  return nlohmann::json::parse(is);
}

inline ParamStore load_params(const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  ParamStore params;
  for (const auto& entry : manifest.at("tensors")) {
    Tensor t = load_tensor(dir / entry.at("file").get<std::string>());
    const auto dims = entry.at("shape").get<std::vector<index_t>>();
    if (!(t.shape() == Shape{std::span<const index_t>(dims)})) {
      throw FormatError("manifest shape mismatch for " + entry.at("name").get<std::string>());
    }
    params.add(entry.at("name").get<std::string>(), std::move(t));
  }
  return params;
}

}  // namespace dmf
