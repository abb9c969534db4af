#include "pearl/head.hpp"

#include <cmath>
#include <random>
#include <string>

#include "pearl/error.hpp"
#include "pearl/serialize.hpp"

namespace pearl {

void to_json(nlohmann::json& j, const HeadConfig& c) {
  j = {{"projection_dim", c.projection_dim}, {"ridge", c.ridge}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, HeadConfig& c) {
  c.projection_dim = j.value("projection_dim", c.projection_dim);
  c.ridge = j.value("ridge", c.ridge);
  c.seed = j.value("seed", c.seed);
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
  if (t.dim() != 2) throw DimensionError("to_matrix: expected a matrix, got " + shape_str(t.shape()));
  Eigen::MatrixXd m(t.size(0), t.size(1));
  auto d = t.data();
  for (std::size_t i = 0; i < t.size(0); ++i) {
    for (std::size_t j = 0; j < t.size(1); ++j) m(i, j) = d[i * t.size(1) + j];
  }
  return m;
}

Tensor from_matrix(const Eigen::MatrixXd& m) {
  std::vector<double> data(static_cast<std::size_t>(m.size()));
  const auto cols = static_cast<std::size_t>(m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) data[i * cols + j] = m(i, j);
  }
  return Tensor::from_data({static_cast<std::size_t>(m.rows()), cols}, std::move(data));
}

AnalyticHead AnalyticHead::init(std::size_t d, std::size_t projection_dim, std::uint64_t seed,
                                double ridge) {
  if (d == 0 || projection_dim == 0) throw ConfigError("head: dimensions must be positive");
  if (!(ridge > 0.0)) throw ConfigError("head: ridge must be positive");
  AnalyticHead h;
  std::mt19937_64 rng(seed);
  h.projection_ = Tensor::randn({d, projection_dim}, 1.0, rng);
  h.projection_matrix_ = to_matrix(h.projection_);
  h.gram_ = Eigen::MatrixXd::Zero(projection_dim, projection_dim);
  h.cross_ = Eigen::MatrixXd::Zero(projection_dim, 0);
  h.weights_ = Eigen::MatrixXd::Zero(projection_dim, 0);
  h.ridge_ = ridge;
  return h;
}

void AnalyticHead::begin_session() { session_floor_ = num_classes_; }

void AnalyticHead::reserve_classes(std::size_t count) {
  if (count == 0) return;
  const auto old = static_cast<Eigen::Index>(num_classes_);
  num_classes_ += count;
  cross_.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(num_classes_));
  cross_.rightCols(static_cast<Eigen::Index>(count)).setZero();
  weights_.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(num_classes_));
  weights_.rightCols(static_cast<Eigen::Index>(num_classes_) - old).setZero();
}

Eigen::MatrixXd AnalyticHead::random_features(const Eigen::MatrixXd& features) const {
  if (static_cast<std::size_t>(features.cols()) != input_dim()) {
    throw DimensionError("head: feature width " + std::to_string(features.cols()) +
                         " != " + std::to_string(input_dim()));
  }
  return (features * projection_matrix_).cwiseMax(0.0);
}

void AnalyticHead::update(const Tensor& features, std::span<const int> labels) {
  if (features.dim() != 2 || features.size(0) != labels.size()) {
    throw DimensionError("head update: features " + shape_str(features.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  std::size_t top = num_classes_;
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) < session_floor_) {
      throw ProtocolError("head update: label " + std::to_string(y) +
                          " belongs to an earlier session");
    }
    top = std::max(top, static_cast<std::size_t>(y) + 1);
  }
  reserve_classes(top - num_classes_);

  const Eigen::MatrixXd phi = random_features(to_matrix(features));
  gram_.noalias() += phi.transpose() * phi;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    cross_.col(labels[i]) += phi.row(static_cast<Eigen::Index>(i)).transpose();
  }
  solve();
}

void AnalyticHead::solve() {
  if (num_classes_ == 0) return;
  Eigen::MatrixXd system = gram_;
  system.diagonal().array() += ridge_;
  Eigen::LLT<Eigen::MatrixXd> llt(system);
  if (llt.info() != Eigen::Success) throw NumericError("head: ridge system is not positive definite");
  weights_ = llt.solve(cross_);
  if (!weights_.allFinite()) throw NumericError("head: non-finite ridge solution");
}

Eigen::MatrixXd AnalyticHead::logits_matrix(const Eigen::MatrixXd& features) const {
  if (features.rows() == 0) return Eigen::MatrixXd(0, static_cast<Eigen::Index>(num_classes_));
  return random_features(features) * weights_;
}

Tensor AnalyticHead::logits(const Tensor& features) const {
  if (num_classes_ == 0) {
    throw ContractError("head logits: no classes observed yet");
  }
  return from_matrix(logits_matrix(to_matrix(features)));
}

void AnalyticHead::save(const std::filesystem::path& manifest) const {
  NamedTensors tensors{{"projection", projection_}, {"gram", from_matrix(gram_)}};
  if (num_classes_ > 0) tensors.emplace_back("cross", from_matrix(cross_));
  save_snapshot(manifest, tensors,
                {{"ridge", ridge_}, {"num_classes", num_classes_}, {"session_floor", session_floor_}});
}

AnalyticHead AnalyticHead::load(const std::filesystem::path& manifest) {
  const Snapshot snap = load_snapshot(manifest);
  AnalyticHead h;
  h.projection_ = snap.at("projection");
  h.projection_matrix_ = to_matrix(h.projection_);
  h.gram_ = to_matrix(snap.at("gram"));
  h.ridge_ = snap.meta.at("ridge").get<double>();
  h.num_classes_ = snap.meta.at("num_classes").get<std::size_t>();
  h.session_floor_ = snap.meta.value("session_floor", std::size_t{0});
  h.cross_ = h.num_classes_ > 0 ? to_matrix(snap.at("cross"))
                                : Eigen::MatrixXd::Zero(h.gram_.rows(), 0);
  h.weights_ = Eigen::MatrixXd::Zero(h.gram_.rows(), static_cast<Eigen::Index>(h.num_classes_));
  h.solve();
  return h;
}

}  // namespace pearl
