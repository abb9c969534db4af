#pragma once

// Class-incremental training loop. One Engine owns every piece of learner
// state for one run; sessions must be run in order 1..N.

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pearl/config.hpp"

namespace pearl {

struct AlphaTraceRow {
  std::size_t tau;
  double mae;
  double alpha;
};

struct SessionMetrics {
  std::size_t session = 0;
  double accuracy = 0.0;
  double final_alpha = 0.0;
  double final_loss = 0.0;
  double wall_seconds = 0.0;
  std::vector<AlphaTraceRow> alpha_trace;  // empty for session 1
};

struct RunReport {
  std::vector<double> per_session_accuracy;
  double average_accuracy = 0.0;
  double final_accuracy = 0.0;
  std::vector<std::vector<AlphaTraceRow>> alpha_traces;
  std::vector<double> final_alpha;
  std::vector<double> wall_times;
  nlohmann::json config;
};

void to_json(nlohmann::json& j, const RunReport& r);

// Mean of the per-session accuracies.
double average_accuracy(const std::vector<double>& per_session);

class Engine {
 public:
  explicit Engine(const RunConfig& cfg);

  // Trains, updates the head, commits the prompts, and evaluates session t
  // on the cumulative test set. Throws ProtocolError when out of order.
  SessionMetrics run_session(std::size_t session, const SessionStream& stream);

  // Accuracy of the committed prompts + head on sessions 1..t.
  double evaluate(std::size_t session, const SessionStream& stream) const;
  // [B x d] features under the committed prompts, no graph.
  Tensor committed_features(const Tensor& x) const;

  const RunConfig& config() const { return cfg_; }
  const Backbone& backbone() const { return backbone_; }
  const PromptPool& pool() const { return pool_; }
  const PromptEncoder& encoder() const { return encoder_; }
  const PrefixProjector& projector() const { return projector_; }
  const AnalyticHead& head() const { return head_; }
  const PromptMemory& memory() const { return memory_; }
  const AlphaState& alpha_state() const { return alpha_; }
  std::size_t committed_sessions() const { return committed_; }

  // Called after each optimizer step with the session and global step index.
  using StepHook = std::function<void(const Engine&, std::size_t session, std::size_t step)>;
  void set_step_hook(StepHook hook) { step_hook_ = std::move(hook); }

  void save_prompt_state(const std::filesystem::path& manifest) const;

 private:
  Tensor features_in_batches(const Dataset& data, const std::vector<PrefixPair>& prefixes) const;

  RunConfig cfg_;
  std::mt19937_64 rng_;
  Backbone backbone_;
  PromptPool pool_;
  PromptEncoder encoder_;
  PrefixProjector projector_;
  AnalyticHead head_;
  PromptMemory memory_;
  AlphaState alpha_;
  std::size_t committed_ = 0;
  StepHook step_hook_;
};

SessionStream make_stream(const RunConfig& cfg);

RunReport run_experiment(const RunConfig& cfg);
RunReport run_experiment(const RunConfig& cfg, const SessionStream& stream);

// report.json, accuracy.csv and alpha_trace_s<t>.csv for t >= 2.
void write_report(const RunReport& report, const std::filesystem::path& dir);

struct AblationRow {
  std::string mode;  // "fixed" or "nka"
  double alpha = 0.0;  // fixed value, or alpha0 for NKA rows
  double average_accuracy = 0.0;
  double final_accuracy = 0.0;
};

// For every value: one run with alpha held constant and one NKA run
// starting from it. Rows come in (fixed, nka) pairs.
std::vector<AblationRow> ablation_fixed_alpha(const RunConfig& cfg,
                                              const std::vector<double>& alpha_values);

}  // namespace pearl
