#pragma once

// Named-array container in the safetensors layout: an 8-byte little-endian
// header length, a JSON header mapping each name to {dtype, shape,
// data_offsets} plus a "__metadata__" string map, then raw float64 data.
// Names are written in sorted order so equal contents give equal bytes.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxmem/common.hpp"

namespace ctxmem {

struct NamedArray {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  bool operator==(const NamedArray&) const = default;
};

struct ArrayFile {
  std::map<std::string, std::string> metadata;
  std::map<std::string, NamedArray> arrays;

  bool operator==(const ArrayFile&) const = default;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "array files assume a little-endian host");

inline std::string encode_array_file(const ArrayFile& file) {
  nlohmann::json header = nlohmann::json::object();
  if (!file.metadata.empty()) header["__metadata__"] = file.metadata;
  std::size_t offset = 0;
  for (const auto& [name, arr] : file.arrays) {
    std::int64_t expected = 1;
    for (auto d : arr.shape) expected *= d;
    if (expected != static_cast<std::int64_t>(arr.data.size()))
      throw Error("array '" + name + "' shape does not match its data length");
    const std::size_t bytes = arr.data.size() * sizeof(double);
    header[name] = {{"dtype", "F64"}, {"shape", arr.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');

  std::string out;
  out.reserve(8 + text.size() + offset);
  const std::uint64_t n = text.size();
  out.append(reinterpret_cast<const char*>(&n), 8);
  out += text;
  for (const auto& [name, arr] : file.arrays)
    out.append(reinterpret_cast<const char*>(arr.data.data()), arr.data.size() * sizeof(double));
  return out;
}

inline ArrayFile decode_array_file(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 8) throw Error(origin + ": truncated array file");
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data(), 8);
  if (8 + n > bytes.size()) throw Error(origin + ": header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, n));
  } catch (const nlohmann::json::exception& e) {
    throw Error(origin + ": malformed header: " + e.what());
  }
  const std::size_t base = 8 + n;
  ArrayFile file;
  for (auto it = header.begin(); it != header.end(); ++it) {
    if (it.key() == "__metadata__") {
      file.metadata = it.value().get<std::map<std::string, std::string>>();
      continue;
    }
    const auto& spec = it.value();
    if (spec.at("dtype") != "F64") throw Error(origin + ": array '" + it.key() + "' is not F64");
    NamedArray arr;
    arr.shape = spec.at("shape").get<std::vector<std::int64_t>>();
    auto offsets = spec.at("data_offsets").get<std::vector<std::size_t>>();
    if (offsets.size() != 2 || offsets[1] < offsets[0] || base + offsets[1] > bytes.size())
      throw Error(origin + ": bad offsets for '" + it.key() + "'");
    arr.data.resize((offsets[1] - offsets[0]) / sizeof(double));
    std::memcpy(arr.data.data(), bytes.data() + base + offsets[0], offsets[1] - offsets[0]);
    file.arrays.emplace(it.key(), std::move(arr));
  }
  return file;
}

}  // namespace detail

inline void write_array_file(const std::filesystem::path& path, const ArrayFile& file) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const std::string bytes = detail::encode_array_file(file);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

inline ArrayFile read_array_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return detail::decode_array_file(bytes, path.string());
}

}  // namespace ctxmem
