#pragma once

#include <cstddef>
#include <vector>

#include "pearl/tensor.hpp"

namespace pearl {

// Momentum SGD with a per-epoch cosine-annealed learning rate:
//   lr(e) = min_lr + 0.5 * (base_lr - min_lr) * (1 + cos(pi * e / total_epochs))
// Velocity follows v <- momentum * v + g, then p <- p - lr * v.
class Sgd {
 public:
  struct Options {
    double base_lr = 0.05;
    double min_lr = 0.0;
    int total_epochs = 10;
    double momentum = 0.9;
  };

  Sgd(std::vector<Tensor> params, Options options);

  double lr() const { return lr_at(current_epoch_); }
  double lr_at(int epoch) const;
  int epoch() const { return current_epoch_; }
  void set_epoch(int epoch);

  // Throws ContractError when a parameter has no populated grad.
  void step();
  void zero_grad();

  const std::vector<Tensor>& params() const { return params_; }
  const Options& options() const { return options_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  Options options_;
  int current_epoch_ = 0;
};

}  // namespace pearl
