#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "pearl/backbone.hpp"
#include "pearl/head.hpp"
#include "pearl/nka.hpp"
#include "pearl/spa.hpp"
#include "pearl/stream.hpp"

namespace pearl {

enum class AlphaMode { kNka, kFixed };

struct RunConfig {
  RunConfig() { reseed(seed); }

  BackboneConfig backbone;
  SpaConfig spa;
  NkaConfig nka;
  HeadConfig head;
  StreamConfig stream;
  std::string stream_path;  // empty: synthesize from `stream`

  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double base_lr = 0.05;
  double min_lr = 0.0;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  std::string output_dir;

  AlphaMode alpha_mode = AlphaMode::kNka;
  double fixed_alpha = 0.9;

  // Derives every component seed from one master seed.
  void reseed(std::uint64_t master);
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace pearl
