#include "pearl/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "pearl/error.hpp"

namespace pearl {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "snapshot I/O assumes a little-endian host");

const Tensor& Snapshot::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ParseError("snapshot: missing tensor '" + name + "'");
  return it->second;
}

void write_f64_block(const fs::path& path, std::span<const double> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!out) throw Error("short write to " + path.string());
}

std::vector<double> read_f64_block(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != count * sizeof(double)) {
    throw ParseError(path.string() + ": expected " + std::to_string(count * sizeof(double)) +
                     " bytes, found " + std::to_string(bytes));
  }
  in.seekg(0);
  std::vector<double> values(count);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw ParseError("short read from " + path.string());
  return values;
}

void save_snapshot(const fs::path& manifest, const NamedTensors& tensors, const json& meta) {
  if (manifest.has_parent_path()) fs::create_directories(manifest.parent_path());
  fs::path blob = manifest;
  blob.replace_extension(".bin");
  std::vector<double> flat;
  json entries = json::array();
  for (const auto& [name, t] : tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", flat.size()}});
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  }
  write_f64_block(blob, flat);
  json doc = {{"format", "pearl-snapshot"},
              {"version", 1},
              {"dtype", "f64"},
              {"byte_order", "little"},
              {"blob", blob.filename().string()},
              {"count", flat.size()},
              {"meta", meta},
              {"tensors", entries}};
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw Error("cannot open " + manifest.string() + " for writing");
  out << doc.dump(2) << '\n';
}

Snapshot load_snapshot(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw ParseError("cannot open " + manifest.string());
  json doc;
  try {
    doc = json::parse(in);
    if (doc.at("format") != "pearl-snapshot" || doc.at("dtype") != "f64" ||
        doc.at("byte_order") != "little") {
      throw ParseError(manifest.string() + ": unsupported snapshot encoding");
    }
    const auto count = doc.at("count").get<std::size_t>();
    const auto flat = read_f64_block(manifest.parent_path() / doc.at("blob").get<std::string>(),
                                     count);
    Snapshot snap;
    snap.meta = doc.value("meta", json::object());
    for (const auto& e : doc.at("tensors")) {
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto n = shape_numel(shape);
      if (offset + n > flat.size()) throw ParseError("snapshot: tensor extends past blob end");
      std::vector<double> data(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                               flat.begin() + static_cast<std::ptrdiff_t>(offset + n));
      snap.tensors.emplace(e.at("name").get<std::string>(),
                           Tensor::from_data(shape, std::move(data)));
    }
    return snap;
  } catch (const json::exception& e) {
    throw ParseError(manifest.string() + ": " + e.what());
  } catch (const DimensionError& e) {
    throw ParseError(manifest.string() + ": " + e.what());
  }
}

}  // namespace pearl
