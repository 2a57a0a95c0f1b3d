#pragma once

#include <string>
#include <vector>

#include "frboost/nn.hpp"

namespace frboost::optim {

using ag::Var;

// Shared bookkeeping: named parameter list with per-parameter freeze flags.
class OptimizerBase {
 public:
  explicit OptimizerBase(const nn::ParamRegistry& reg);
  void zero_grad();
  // Marks every parameter whose name starts with any of the prefixes.
  void set_frozen_by_prefix(const std::vector<std::string>& prefixes, bool frozen);
  void set_all_frozen(bool frozen);
  size_t size() const { return params_.size(); }
  const std::string& name(size_t i) const { return names_[i]; }
  bool frozen(size_t i) const { return frozen_[i] != 0; }

 protected:
  std::vector<std::string> names_;
  std::vector<Var> params_;
  std::vector<char> frozen_;
};

// Adaptive moment estimation.
class Adam : public OptimizerBase {
 public:
  Adam(const nn::ParamRegistry& reg, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step();
  double lr;
  double beta1, beta2, eps;

 private:
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// SGD with classical momentum and decoupled-from-schedule weight decay
// (decay is added to the gradient, matching the common convention).
class Sgd : public OptimizerBase {
 public:
  Sgd(const nn::ParamRegistry& reg, double lr, double momentum = 0.0, double weight_decay = 0.0);
  void step();
  double lr;
  double momentum, weight_decay;

 private:
  std::vector<Tensor> vel_;
};

// Step decay: lr0 / factor^(epoch / drop_every), integer division, epoch 0-based.
double step_decay_lr(double lr0, int epoch, int drop_every, double factor);

}  // namespace frboost::optim
