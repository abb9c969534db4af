#include "pearl/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "pearl/error.hpp"

namespace pearl {

Sgd::Sgd(std::vector<Tensor> params, Options options)
    : params_(std::move(params)), options_(options) {
  if (!(options_.base_lr > 0.0) || options_.min_lr < 0.0 || options_.total_epochs < 1 ||
      options_.momentum < 0.0 || options_.momentum >= 1.0) {
    throw ConfigError("sgd: invalid options");
  }
  for (const auto& p : params_) {
    if (!p.requires_grad() || !p.is_leaf()) {
      throw ContractError("sgd: parameters must be leaves that require grad");
    }
    velocity_.emplace_back(p.numel(), 0.0);
  }
}

double Sgd::lr_at(int epoch) const {
  const double frac = static_cast<double>(epoch) / options_.total_epochs;
  return options_.min_lr +
         0.5 * (options_.base_lr - options_.min_lr) * (1.0 + std::cos(std::numbers::pi * frac));
}

void Sgd::set_epoch(int epoch) {
  if (epoch < 0 || epoch > options_.total_epochs) {
    throw ContractError("sgd: epoch " + std::to_string(epoch) + " outside schedule");
  }
  current_epoch_ = epoch;
}

void Sgd::step() {
  for (const auto& p : params_) {
    if (!p.has_grad()) throw ContractError("sgd: parameter is missing its grad");
  }
  const double rate = lr();
  const double mu = options_.momentum;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto data = params_[i].mutable_data();
    auto grad = params_[i].grad();
    auto& vel = velocity_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      vel[j] = mu * vel[j] + grad[j];
      data[j] -= rate * vel[j];
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace pearl
