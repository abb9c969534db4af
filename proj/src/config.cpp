#include "pearl/config.hpp"

#include <fstream>

#include "pearl/error.hpp"

namespace pearl {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

void RunConfig::reseed(std::uint64_t master) {
  seed = master;
  backbone.seed = splitmix64(master ^ 0x1);
  spa.seed = splitmix64(master ^ 0x2);
  head.seed = splitmix64(master ^ 0x3);
  stream.seed = splitmix64(master ^ 0x4);
}

void RunConfig::validate() const {
  backbone.validate();
  spa.validate(backbone.d);
  AlphaState::from_config(nka);
  if (spa.depth != backbone.prefix_blocks) {
    throw ConfigError("config: encoder depth must equal the number of prefixed backbone blocks");
  }
  if (spa.num_heads != backbone.num_heads) {
    throw ConfigError("config: encoder and backbone head counts differ");
  }
  if (stream_path.empty()) {
    if (stream.num_sessions != spa.num_sessions) {
      throw ConfigError("config: stream sessions differ from spa.num_sessions");
    }
    if (stream.input_dim != backbone.input_dim) {
      throw ConfigError("config: stream input_dim differs from backbone.input_dim");
    }
  }
  if (epochs == 0 || batch_size == 0) throw ConfigError("config: epochs and batch_size must be positive");
  if (!(head.ridge > 0.0)) throw ConfigError("config: head ridge must be positive");
  if (alpha_mode == AlphaMode::kFixed && !(fixed_alpha >= 0.0 && fixed_alpha <= 1.0)) {
    throw ConfigError("config: fixed_alpha must lie in [0, 1]");
  }
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"backbone", c.backbone},
       {"spa", c.spa},
       {"nka", c.nka},
       {"head", c.head},
       {"stream", c.stream},
       {"stream_path", c.stream_path},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"base_lr", c.base_lr},
       {"min_lr", c.min_lr},
       {"momentum", c.momentum},
       {"seed", c.seed},
       {"output_dir", c.output_dir},
       {"alpha_mode", c.alpha_mode == AlphaMode::kNka ? "nka" : "fixed"},
       {"fixed_alpha", c.fixed_alpha}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (j.contains("seed")) c.reseed(j.at("seed").get<std::uint64_t>());
  if (j.contains("backbone")) from_json(j.at("backbone"), c.backbone);
  if (j.contains("spa")) from_json(j.at("spa"), c.spa);
  if (j.contains("nka")) from_json(j.at("nka"), c.nka);
  if (j.contains("head")) from_json(j.at("head"), c.head);
  if (j.contains("stream")) from_json(j.at("stream"), c.stream);
  c.stream_path = j.value("stream_path", c.stream_path);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.min_lr = j.value("min_lr", c.min_lr);
  c.momentum = j.value("momentum", c.momentum);
  c.output_dir = j.value("output_dir", c.output_dir);
  const std::string mode = j.value("alpha_mode", std::string("nka"));
  if (mode == "nka") {
    c.alpha_mode = AlphaMode::kNka;
  } else if (mode == "fixed") {
    c.alpha_mode = AlphaMode::kFixed;
  } else {
    throw ConfigError("config: alpha_mode must be 'nka' or 'fixed'");
  }
  c.fixed_alpha = j.value("fixed_alpha", c.fixed_alpha);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    RunConfig c;
    from_json(nlohmann::json::parse(in), c);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace pearl
