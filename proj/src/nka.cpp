#include "pearl/nka.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pearl/error.hpp"

namespace pearl {

void to_json(nlohmann::json& j, const NkaConfig& c) {
  j = {{"alpha0", c.alpha0},           {"gamma", c.gamma},
       {"lambda", c.lambda},           {"theta_max", c.theta_max},
       {"theta_min", c.theta_min},     {"sigmoid_center", c.sigmoid_center},
       {"sigmoid_scale", c.sigmoid_scale}};
}

void from_json(const nlohmann::json& j, NkaConfig& c) {
  c.alpha0 = j.value("alpha0", c.alpha0);
  c.gamma = j.value("gamma", c.gamma);
  c.lambda = j.value("lambda", c.lambda);
  c.theta_max = j.value("theta_max", c.theta_max);
  c.theta_min = j.value("theta_min", c.theta_min);
  c.sigmoid_center = j.value("sigmoid_center", c.sigmoid_center);
  c.sigmoid_scale = j.value("sigmoid_scale", c.sigmoid_scale);
}

AlphaState AlphaState::from_config(const NkaConfig& cfg) {
  AlphaState s;
  s.alpha = cfg.alpha0;
  s.alpha0 = cfg.alpha0;
  s.gamma = cfg.gamma;
  s.lambda = cfg.lambda;
  s.theta_max = cfg.theta_max;
  s.theta_min = cfg.theta_min;
  s.sigmoid_center = cfg.sigmoid_center;
  s.sigmoid_scale = cfg.sigmoid_scale;
  s.validate();
  return s;
}

void AlphaState::validate() const {
  if (!(theta_min > 0.0 && theta_min < theta_max && theta_max < 1.0)) {
    throw ConfigError("nka: need 0 < theta_min < theta_max < 1");
  }
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("nka: gamma must lie in [0, 1]");
  if (!(alpha0 >= 0.0 && alpha0 <= 1.0)) throw ConfigError("nka: alpha0 must lie in [0, 1]");
  if (!(sigmoid_scale > 0.0)) throw ConfigError("nka: sigmoid_scale must be positive");
  if (!(lambda > 0.0)) throw ConfigError("nka: lambda must be positive");
}

double AlphaState::lower_bound() const { return std::min(alpha0, theta_min); }
double AlphaState::upper_bound() const { return std::max(alpha0, theta_max); }

double compute_mae(const Tensor& l_t, const Tensor& l_prev, double lambda,
                   std::size_t classes_per_session, std::size_t session) {
  if (session < 2) throw ContractError("compute_mae: no previous session before t=2");
  const std::size_t old_classes = classes_per_session * (session - 1);
  const std::size_t rows_t = l_t.dim() == 1 ? 1 : l_t.size(0);
  const std::size_t cols_t = l_t.shape().back();
  const std::size_t rows_p = l_prev.dim() == 1 ? 1 : l_prev.size(0);
  const std::size_t cols_p = l_prev.shape().back();
  if (l_t.dim() > 2 || l_prev.dim() > 2 || rows_t != rows_p) {
    throw DimensionError("compute_mae: batch shapes " + shape_str(l_t.shape()) + " and " +
                         shape_str(l_prev.shape()) + " disagree");
  }
  if (cols_p != old_classes || cols_t < old_classes) {
    throw DimensionError("compute_mae: expected " + std::to_string(old_classes) +
                         " previous logits, got l_t " + shape_str(l_t.shape()) + " and l_prev " +
                         shape_str(l_prev.shape()));
  }
  auto a = l_t.data();
  auto b = l_prev.data();
  double acc = 0.0;
  for (std::size_t r = 0; r < rows_t; ++r) {
    for (std::size_t c = 0; c < old_classes; ++c) {
      acc += std::abs(a[r * cols_t + c] * lambda - b[r * cols_p + c] * lambda);
    }
  }
  return acc / static_cast<double>(rows_t * old_classes);
}

double bounded_sigmoid(const AlphaState& state, double mae) {
  const double z = (mae - state.sigmoid_center) / state.sigmoid_scale;
  const double logistic = 1.0 / (1.0 + std::exp(-z));
  return state.theta_min + (state.theta_max - state.theta_min) * logistic;
}

double update_alpha(AlphaState& state, double mae) {
  if (!(mae >= 0.0)) throw ContractError("update_alpha: mae must be non-negative");
  state.alpha = state.gamma * state.alpha + (1.0 - state.gamma) * bounded_sigmoid(state, mae);
  ++state.tau;
  return state.alpha;
}

Tensor mix_prompts(const PromptMemory& mem, const Tensor& curr_tokens, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("mix_prompts: alpha outside [0, 1]");
  if (mem.prev_tokens.shape() != curr_tokens.shape()) {
    throw DimensionError("mix_prompts: " + shape_str(mem.prev_tokens.shape()) + " vs " +
                         shape_str(curr_tokens.shape()));
  }
  return add(scale(mem.prev_tokens, alpha), scale(curr_tokens, 1.0 - alpha));
}

DualLogits dual_forward(const Backbone& backbone, const AnalyticHead& head,
                        const PrefixProjector& projector, const Tensor& x,
                        const PromptMemory& mem, const Tensor& curr_tokens, double alpha) {
  DualLogits out;
  {
    NoGradGuard no_grad;
    const Tensor prev_features =
        backbone.forward_batch(x, projector.to_prefixes({mem.prev_tokens}));
    const Tensor all = head.logits(prev_features);
    out.l_prev = all;
  }
  out.mixed = mix_prompts(mem, curr_tokens, alpha);
  out.features = backbone.forward_batch(x, projector.to_prefixes({out.mixed}));
  out.l_t = head.logits(out.features);
  return out;
}

void session_commit(PromptMemory& mem, AlphaState& state) {
  if (mem.mem_tokens.defined()) mem.prev_tokens = mem.mem_tokens.detach();
  state.alpha = state.alpha0;
  state.tau = 0;
}

}  // namespace pearl
