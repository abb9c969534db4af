#pragma once

// Class-incremental session streams. Labels inside a stream are internal
// ids: session t (1-based) owns ids K(t-1) .. Kt-1. class_maps keeps the
// original label of every internal id for file round trips.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "pearl/tensor.hpp"

namespace pearl {

struct Dataset {
  std::size_t dim = 0;
  std::vector<double> features;  // row-major [size x dim]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }
  // [indices.size() x dim]
  Tensor batch(std::span<const std::size_t> indices) const;
  void append(const Dataset& other);
};

struct SessionStream {
  std::size_t classes_per_session = 0;
  std::size_t input_dim = 0;
  std::vector<Dataset> train;
  std::vector<Dataset> test;
  std::vector<std::vector<int>> class_maps;  // original labels, per session

  std::size_t num_sessions() const { return train.size(); }
  // Union of the test sets of sessions 1..t.
  Dataset cumulative_test(std::size_t session) const;
  // Throws ProtocolError on any violated stream invariant.
  void validate() const;
};

struct StreamConfig {
  std::size_t num_sessions = 5;
  std::size_t classes_per_session = 4;
  std::size_t samples_per_class = 50;
  std::size_t input_dim = 16;
  double cluster_spread = 0.8;
  std::uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const StreamConfig& c);
void from_json(const nlohmann::json& j, StreamConfig& c);

// One seeded Gaussian cluster per class; 80/20 train/test split per class.
SessionStream make_synthetic_stream(const StreamConfig& cfg);

// JSON manifest plus one raw little-endian f64 block per session split.
void save_stream(const SessionStream& stream, const std::filesystem::path& manifest);
SessionStream load_stream(const std::filesystem::path& manifest);

}  // namespace pearl
