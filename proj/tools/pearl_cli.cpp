// Command-line driver: full runs, the fixed-alpha ablation, stream
// generation, and trace inspection.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "pearl/engine.hpp"
#include "pearl/error.hpp"

namespace {

using pearl::RunConfig;
namespace fs = std::filesystem;

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> base_lr;
  std::optional<double> momentum;
  std::optional<std::string> output_dir;
  std::optional<std::string> stream_path;
  std::optional<std::string> alpha_mode;
  std::optional<double> fixed_alpha;
  std::optional<double> alpha0;
  std::optional<double> gamma;
  std::optional<double> lambda;
  std::optional<std::size_t> sessions;
  std::optional<std::size_t> classes;
  std::optional<std::size_t> samples_per_class;
  std::optional<double> spread;
  std::optional<std::size_t> pool_size;
  std::optional<double> ridge;
  bool full_preset = false;
};

void add_run_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "Master seed; overrides the config");
  app->add_option("--epochs", o.epochs);
  app->add_option("--batch-size", o.batch_size);
  app->add_option("--lr", o.base_lr, "Base learning rate");
  app->add_option("--momentum", o.momentum);
  app->add_option("--output-dir,-o", o.output_dir);
  app->add_option("--stream", o.stream_path, "Stream manifest to load instead of synthesizing");
  app->add_option("--alpha-mode", o.alpha_mode)->check(CLI::IsMember({"nka", "fixed"}));
  app->add_option("--fixed-alpha", o.fixed_alpha);
  app->add_option("--alpha0", o.alpha0);
  app->add_option("--gamma", o.gamma);
  app->add_option("--lambda", o.lambda);
  app->add_option("--sessions", o.sessions);
  app->add_option("--classes-per-session", o.classes);
  app->add_option("--samples-per-class", o.samples_per_class);
  app->add_option("--spread", o.spread, "Synthetic cluster spread");
  app->add_option("--pool-size", o.pool_size);
  app->add_option("--ridge", o.ridge);
  app->add_flag("--full-preset", o.full_preset, "Full-size prompt pool");
}

RunConfig resolve(const Overrides& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : pearl::load_run_config(o.config_path);
  if (o.seed) cfg.reseed(*o.seed);
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.batch_size) cfg.batch_size = *o.batch_size;
  if (o.base_lr) cfg.base_lr = *o.base_lr;
  if (o.momentum) cfg.momentum = *o.momentum;
  if (o.output_dir) cfg.output_dir = *o.output_dir;
  if (o.stream_path) cfg.stream_path = *o.stream_path;
  if (o.alpha_mode) cfg.alpha_mode = *o.alpha_mode == "fixed" ? pearl::AlphaMode::kFixed : pearl::AlphaMode::kNka;
  if (o.fixed_alpha) cfg.fixed_alpha = *o.fixed_alpha;
  if (o.alpha0) cfg.nka.alpha0 = *o.alpha0;
  if (o.gamma) cfg.nka.gamma = *o.gamma;
  if (o.lambda) cfg.nka.lambda = *o.lambda;
  if (o.sessions) cfg.stream.num_sessions = cfg.spa.num_sessions = *o.sessions;
  if (o.classes) cfg.stream.classes_per_session = *o.classes;
  if (o.samples_per_class) cfg.stream.samples_per_class = *o.samples_per_class;
  if (o.spread) cfg.stream.cluster_spread = *o.spread;
  if (o.full_preset) {
    const auto seed = cfg.spa.seed;
    cfg.spa = pearl::SpaConfig::full_preset(cfg.spa.num_sessions);
    cfg.spa.seed = seed;
  }
  if (o.pool_size) cfg.spa.pool_size = *o.pool_size;
  if (o.ridge) cfg.head.ridge = *o.ridge;
  cfg.validate();
  return cfg;
}

void print_report(const pearl::RunReport& r) {
  for (std::size_t t = 0; t < r.per_session_accuracy.size(); ++t) {
    std::printf("session %zu  acc %.4f  alpha %.4f  %.1fs\n", t + 1, r.per_session_accuracy[t],
                r.final_alpha[t], r.wall_times[t]);
  }
  std::printf("average %.4f  final %.4f\n", r.average_accuracy, r.final_accuracy);
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

int inspect(const fs::path& dir) {
  std::ifstream rep(dir / "report.json");
  if (!rep) throw pearl::ParseError("no report.json in " + dir.string());
  const auto j = nlohmann::json::parse(rep);
  std::cout << "average " << j.at("average_accuracy") << "  final " << j.at("final_accuracy") << '\n';
  const auto acc = j.at("per_session_accuracy");
  for (std::size_t t = 0; t < acc.size(); ++t) {
    std::cout << "session " << t + 1 << "  acc " << acc[t];
    const fs::path trace = dir / ("alpha_trace_s" + std::to_string(t + 1) + ".csv");
    std::ifstream in(trace);
    if (in) {
      std::string line, last;
      std::size_t rows = 0;
      std::getline(in, line);
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        last = line;
        ++rows;
      }
      std::cout << "  trace rows " << rows << "  last " << last;
    }
    std::cout << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-incremental prompt learning with negative-feedback accumulation"};
  app.require_subcommand(1);

  Overrides run_opts;
  auto* run = app.add_subcommand("run", "Run a full experiment");
  add_run_flags(run, run_opts);

  Overrides abl_opts;
  std::string alpha_list = "0.6,0.7,0.8,0.9";
  auto* ablate = app.add_subcommand("ablate-alpha", "Fixed alpha vs adaptive alpha, paired runs");
  add_run_flags(ablate, abl_opts);
  ablate->add_option("--alphas", alpha_list, "Comma-separated alpha values");

  Overrides gen_opts;
  std::string stream_out;
  auto* gen = app.add_subcommand("gen-stream", "Write a synthetic stream to disk");
  add_run_flags(gen, gen_opts);
  gen->add_option("path", stream_out, "Output manifest")->required();

  std::string inspect_dir;
  auto* insp = app.add_subcommand("inspect", "Summarize a run's outputs and alpha traces");
  insp->add_option("dir", inspect_dir)->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      print_report(pearl::run_experiment(resolve(run_opts)));
    } else if (*ablate) {
      const RunConfig cfg = resolve(abl_opts);
      const auto rows = pearl::ablation_fixed_alpha(cfg, parse_list(alpha_list));
      std::printf("mode   alpha  average  final\n");
      for (const auto& r : rows) {
        std::printf("%-6s %.3f  %.4f   %.4f\n", r.mode.c_str(), r.alpha, r.average_accuracy,
                    r.final_accuracy);
      }
      if (!cfg.output_dir.empty()) {
        fs::create_directories(cfg.output_dir);
        std::ofstream out(fs::path(cfg.output_dir) / "ablation.csv");
        out << "mode,alpha,average_accuracy,final_accuracy\n";
        for (const auto& r : rows) {
          out << r.mode << ',' << r.alpha << ',' << r.average_accuracy << ',' << r.final_accuracy << '\n';
        }
      }
    } else if (*gen) {
      const RunConfig cfg = resolve(gen_opts);
      pearl::save_stream(pearl::make_synthetic_stream(cfg.stream), stream_out);
      std::printf("wrote %s\n", stream_out.c_str());
    } else if (*insp) {
      return inspect(inspect_dir);
    }
  } catch (const pearl::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
