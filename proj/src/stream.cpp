#include "pearl/stream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>

#include "pearl/error.hpp"
#include "pearl/serialize.hpp"

namespace pearl {

namespace fs = std::filesystem;
using nlohmann::json;

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  std::vector<double> out;
  out.reserve(indices.size() * dim);
  for (auto i : indices) {
    if (i >= size()) throw IndexError("dataset: sample index out of range");
    auto r = row(i);
    out.insert(out.end(), r.begin(), r.end());
  }
  return Tensor::from_data({indices.size(), dim}, std::move(out));
}

void Dataset::append(const Dataset& other) {
  if (dim == 0) dim = other.dim;
  if (other.dim != dim) throw DimensionError("dataset: appending rows of a different width");
  features.insert(features.end(), other.features.begin(), other.features.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

Dataset SessionStream::cumulative_test(std::size_t session) const {
  if (session < 1 || session > num_sessions()) {
    throw ContractError("cumulative_test: session " + std::to_string(session) + " out of range");
  }
  Dataset out;
  out.dim = input_dim;
  for (std::size_t t = 0; t < session; ++t) out.append(test[t]);
  return out;
}

void SessionStream::validate() const {
  const std::size_t n = num_sessions();
  if (n == 0 || classes_per_session == 0 || input_dim == 0) {
    throw ProtocolError("stream: empty stream");
  }
  if (test.size() != n || class_maps.size() != n) {
    throw ProtocolError("stream: train/test/class map counts differ");
  }
  std::set<int> seen;
  for (std::size_t t = 0; t < n; ++t) {
    if (class_maps[t].size() != classes_per_session) {
      throw ProtocolError("stream: session " + std::to_string(t + 1) + " has " +
                          std::to_string(class_maps[t].size()) + " classes, expected " +
                          std::to_string(classes_per_session));
    }
    for (int original : class_maps[t]) {
      if (!seen.insert(original).second) {
        throw ProtocolError("stream: class " + std::to_string(original) +
                            " appears in more than one session");
      }
    }
    const int lo = static_cast<int>(classes_per_session * t);
    const int hi = static_cast<int>(classes_per_session * (t + 1));
    for (const Dataset* ds : {&train[t], &test[t]}) {
      if (ds->dim != input_dim || ds->features.size() != ds->size() * input_dim) {
        throw ProtocolError("stream: feature block has the wrong width");
      }
      for (int y : ds->labels) {
        if (y < lo || y >= hi) {
          throw ProtocolError("stream: label outside session " + std::to_string(t + 1) +
                              "'s classes");
        }
      }
    }
    if (train[t].size() == 0) throw ProtocolError("stream: session without training data");
  }
}

void to_json(json& j, const StreamConfig& c) {
  j = {{"num_sessions", c.num_sessions},
       {"classes_per_session", c.classes_per_session},
       {"samples_per_class", c.samples_per_class},
       {"input_dim", c.input_dim},
       {"cluster_spread", c.cluster_spread},
       {"seed", c.seed}};
}

void from_json(const json& j, StreamConfig& c) {
  c.num_sessions = j.value("num_sessions", c.num_sessions);
  c.classes_per_session = j.value("classes_per_session", c.classes_per_session);
  c.samples_per_class = j.value("samples_per_class", c.samples_per_class);
  c.input_dim = j.value("input_dim", c.input_dim);
  c.cluster_spread = j.value("cluster_spread", c.cluster_spread);
  c.seed = j.value("seed", c.seed);
}

SessionStream make_synthetic_stream(const StreamConfig& cfg) {
  if (cfg.num_sessions == 0 || cfg.classes_per_session == 0 || cfg.samples_per_class < 2 ||
      cfg.input_dim == 0 || !(cfg.cluster_spread > 0.0)) {
    throw ConfigError("synthetic stream: sizes must be positive (>= 2 samples per class)");
  }
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const std::size_t n_test =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.2 * cfg.samples_per_class)));
  const std::size_t n_train = cfg.samples_per_class - n_test;

  SessionStream s;
  s.classes_per_session = cfg.classes_per_session;
  s.input_dim = cfg.input_dim;
  for (std::size_t t = 0; t < cfg.num_sessions; ++t) {
    Dataset train{cfg.input_dim, {}, {}};
    Dataset test{cfg.input_dim, {}, {}};
    std::vector<int> classes;
    for (std::size_t c = 0; c < cfg.classes_per_session; ++c) {
      const int label = static_cast<int>(t * cfg.classes_per_session + c);
      classes.push_back(label);
      std::vector<double> center(cfg.input_dim);
      for (auto& v : center) v = unit(rng);
      for (std::size_t i = 0; i < cfg.samples_per_class; ++i) {
        Dataset& dst = i < n_train ? train : test;
        for (std::size_t k = 0; k < cfg.input_dim; ++k) {
          dst.features.push_back(center[k] + cfg.cluster_spread * unit(rng));
        }
        dst.labels.push_back(label);
      }
    }
    s.train.push_back(std::move(train));
    s.test.push_back(std::move(test));
    s.class_maps.push_back(std::move(classes));
  }
  s.validate();
  return s;
}

namespace {

json split_entry(const SessionStream& s, std::size_t t, const Dataset& ds, const std::string& file) {
  std::vector<int> original;
  original.reserve(ds.size());
  for (int y : ds.labels) {
    original.push_back(s.class_maps[t][static_cast<std::size_t>(y) - t * s.classes_per_session]);
  }
  return {{"file", file}, {"count", ds.size()}, {"labels", original}};
}

Dataset read_split(const json& entry, const fs::path& dir, std::size_t dim,
                   const std::map<int, int>& to_internal, std::size_t session) {
  Dataset ds;
  ds.dim = dim;
  const auto count = entry.at("count").get<std::size_t>();
  const auto labels = entry.at("labels").get<std::vector<int>>();
  if (labels.size() != count) throw ParseError("stream: label count does not match sample count");
  for (int original : labels) {
    auto it = to_internal.find(original);
    if (it == to_internal.end()) {
      throw ProtocolError("stream: label " + std::to_string(original) +
                          " is not a class of session " + std::to_string(session));
    }
    ds.labels.push_back(it->second);
  }
  ds.features = read_f64_block(dir / entry.at("file").get<std::string>(), count * dim);
  return ds;
}

}  // namespace

void save_stream(const SessionStream& stream, const fs::path& manifest) {
  stream.validate();
  const fs::path dir = manifest.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  const std::string stem = manifest.stem().string();
  json sessions = json::array();
  for (std::size_t t = 0; t < stream.num_sessions(); ++t) {
    const std::string base = stem + "_s" + std::to_string(t + 1);
    write_f64_block(dir / (base + "_train.f64"), stream.train[t].features);
    write_f64_block(dir / (base + "_test.f64"), stream.test[t].features);
    sessions.push_back({{"classes", stream.class_maps[t]},
                        {"train", split_entry(stream, t, stream.train[t], base + "_train.f64")},
                        {"test", split_entry(stream, t, stream.test[t], base + "_test.f64")}});
  }
  json doc = {{"format", "pearl-stream"},
              {"version", 1},
              {"dtype", "f64"},
              {"byte_order", "little"},
              {"num_sessions", stream.num_sessions()},
              {"classes_per_session", stream.classes_per_session},
              {"input_dim", stream.input_dim},
              {"sessions", sessions}};
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw Error("cannot open " + manifest.string() + " for writing");
  out << doc.dump(2) << '\n';
}

SessionStream load_stream(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw ParseError("cannot open " + manifest.string());
  SessionStream s;
  try {
    const json doc = json::parse(in);
    if (doc.at("format") != "pearl-stream" || doc.at("dtype") != "f64" ||
        doc.at("byte_order") != "little") {
      throw ParseError(manifest.string() + ": not a pearl f64 stream manifest");
    }
    s.classes_per_session = doc.at("classes_per_session").get<std::size_t>();
    s.input_dim = doc.at("input_dim").get<std::size_t>();
    const auto& sessions = doc.at("sessions");
    if (sessions.size() != doc.at("num_sessions").get<std::size_t>()) {
      throw ParseError("stream: num_sessions does not match the session list");
    }
    const fs::path dir = manifest.parent_path();
    std::set<int> seen;
    for (std::size_t t = 0; t < sessions.size(); ++t) {
      const auto classes = sessions[t].at("classes").get<std::vector<int>>();
      std::map<int, int> to_internal;
      for (std::size_t j = 0; j < classes.size(); ++j) {
        if (!seen.insert(classes[j]).second) {
          throw ProtocolError("stream: class " + std::to_string(classes[j]) +
                              " is shared between sessions");
        }
        to_internal[classes[j]] = static_cast<int>(t * s.classes_per_session + j);
      }
      s.class_maps.push_back(classes);
      s.train.push_back(read_split(sessions[t].at("train"), dir, s.input_dim, to_internal, t + 1));
      s.test.push_back(read_split(sessions[t].at("test"), dir, s.input_dim, to_internal, t + 1));
    }
  } catch (const json::exception& e) {
    throw ParseError(manifest.string() + ": " + e.what());
  }
  s.validate();
  return s;
}

}  // namespace pearl
