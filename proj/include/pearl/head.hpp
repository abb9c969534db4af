#pragma once

// Analytic classifier in the random-projection style: a frozen random
// projection followed by ReLU, and ridge-regression weights solved in
// closed form from accumulated second-moment statistics. Nothing here is
// trained by gradient descent.

#include <cstdint>
#include <filesystem>
#include <span>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "pearl/transformer.hpp"

namespace pearl {

struct HeadConfig {
  std::size_t projection_dim = 0;  // 0 means 4*d
  double ridge = 1.0;
  std::uint64_t seed = 13;
};

void to_json(nlohmann::json& j, const HeadConfig& c);
void from_json(const nlohmann::json& j, HeadConfig& c);

class AnalyticHead {
 public:
  static AnalyticHead init(std::size_t d, std::size_t projection_dim, std::uint64_t seed,
                           double ridge);

  // Starts a new session: labels below the current class count become
  // protocol errors for subsequent updates.
  void begin_session();
  // Adds zero columns for classes not yet observed.
  void reserve_classes(std::size_t count);

  // features [B x d]; only values are read, so no gradient reaches the head.
  void update(const Tensor& features, std::span<const int> labels);
  // [B x C_seen], no graph. B may be zero via the overload below.
  Tensor logits(const Tensor& features) const;
  Eigen::MatrixXd logits_matrix(const Eigen::MatrixXd& features) const;

  // phi = relu(features * projection)
  Eigen::MatrixXd random_features(const Eigen::MatrixXd& features) const;

  std::size_t num_classes() const { return num_classes_; }
  std::size_t input_dim() const { return projection_.size(0); }
  std::size_t projection_dim() const { return projection_.size(1); }
  double ridge() const { return ridge_; }
  const Tensor& projection() const { return projection_; }
  const Eigen::MatrixXd& gram() const { return gram_; }
  const Eigen::MatrixXd& cross() const { return cross_; }
  const Eigen::MatrixXd& weights() const { return weights_; }

  void save(const std::filesystem::path& manifest) const;
  static AnalyticHead load(const std::filesystem::path& manifest);

 private:
  void solve();

  Tensor projection_;        // [d x D], frozen
  Eigen::MatrixXd projection_matrix_;
  Eigen::MatrixXd gram_;     // [D x D]
  Eigen::MatrixXd cross_;    // [D x C_seen]
  Eigen::MatrixXd weights_;  // [D x C_seen]
  double ridge_ = 1.0;
  std::size_t num_classes_ = 0;
  std::size_t session_floor_ = 0;
};

Eigen::MatrixXd to_matrix(const Tensor& t);
Tensor from_matrix(const Eigen::MatrixXd& m);

}  // namespace pearl
