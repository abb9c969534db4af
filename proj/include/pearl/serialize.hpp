#pragma once

// Snapshot format shared by every persisted array: a JSON manifest next to a
// flat little-endian f64 blob.
//
//   <name>.json  {"format": "pearl-snapshot", "version": 1, "dtype": "f64",
//                 "byte_order": "little", "blob": "<name>.bin",
//                 "meta": {...}, "tensors": [{"name", "shape", "offset"}]}
//   <name>.bin   tensors back to back; offset counts f64 elements.

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "pearl/transformer.hpp"

namespace pearl {

struct Snapshot {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  // Throws ParseError when the tensor is absent.
  const Tensor& at(const std::string& name) const;
};

void save_snapshot(const std::filesystem::path& manifest, const NamedTensors& tensors,
                   const nlohmann::json& meta = nlohmann::json::object());
Snapshot load_snapshot(const std::filesystem::path& manifest);

// Raw little-endian f64 block I/O, also used by the stream format.
void write_f64_block(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64_block(const std::filesystem::path& path, std::size_t count);

}  // namespace pearl
