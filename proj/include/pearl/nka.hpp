#pragma once

// Negative-feedback knowledge accumulation.
//
// The divergence between the current logits and the logits produced by the
// previous session's prompts drives a bounded, increasing sigmoid; an EMA of
// that signal is the mixing weight alpha between the previous prompt tokens
// and the current ones. Large divergence pushes alpha up (hold on to the old
// prompts), small divergence lets alpha fall (learn the new task).

#include <cstddef>
#include <vector>

#include <nlohmann/json.hpp>

#include "pearl/backbone.hpp"
#include "pearl/head.hpp"
#include "pearl/spa.hpp"

namespace pearl {

struct NkaConfig {
  double alpha0 = 0.99;
  double gamma = 0.9;
  double lambda = 12500.0;
  double theta_max = 0.999;
  double theta_min = 0.7;
  double sigmoid_center = 50.0;
  double sigmoid_scale = 10.0;
};

void to_json(nlohmann::json& j, const NkaConfig& c);
void from_json(const nlohmann::json& j, NkaConfig& c);

struct AlphaState {
  double alpha = 0.99;
  double alpha0 = 0.99;
  double gamma = 0.9;
  double lambda = 12500.0;
  double theta_max = 0.999;
  double theta_min = 0.7;
  double sigmoid_center = 50.0;
  double sigmoid_scale = 10.0;
  std::size_t tau = 0;

  static AlphaState from_config(const NkaConfig& cfg);
  // Throws ConfigError.
  void validate() const;
  // [min(alpha0, theta_min), max(alpha0, theta_max)]
  double lower_bound() const;
  double upper_bound() const;
};

// Mean absolute error between the first K(t-1) columns of l_t and l_prev,
// both scaled by lambda. Accepts [C] vectors or [B x C] batches.
double compute_mae(const Tensor& l_t, const Tensor& l_prev, double lambda, std::size_t classes_per_session,
                   std::size_t session);

// theta_min + (theta_max - theta_min) * logistic((mae - center) / scale)
double bounded_sigmoid(const AlphaState& state, double mae);

// alpha <- gamma * alpha + (1 - gamma) * sigma(mae); tau += 1.
double update_alpha(AlphaState& state, double mae);

struct PromptMemory {
  Tensor prev_tokens;  // [L x H x d], detached, read-only within a session
  Tensor mem_tokens;   // [L x H x d]
};

// alpha * prev + (1 - alpha) * curr. Gradient reaches curr only.
Tensor mix_prompts(const PromptMemory& mem, const Tensor& curr_tokens, double alpha);

struct DualLogits {
  Tensor l_prev;    // [B x K(t-1)], no graph
  Tensor l_t;       // [B x C_seen], no graph
  Tensor features;  // [B x d], taped through the mixed prompts
  Tensor mixed;     // the mixed token stack that produced `features`
};

// Previous-prompt logits (no graph) and current mixed-prompt logits for a
// batch x [B x input_dim]. The head's first K(t-1) columns score l_prev.
DualLogits dual_forward(const Backbone& backbone, const AnalyticHead& head,
                        const PrefixProjector& projector, const Tensor& x,
                        const PromptMemory& mem, const Tensor& curr_tokens, double alpha);

// Stores the session's final mixed tokens as the next session's previous
// tokens and resets alpha to alpha0.
void session_commit(PromptMemory& mem, AlphaState& state);

}  // namespace pearl
