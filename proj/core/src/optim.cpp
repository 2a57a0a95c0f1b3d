#include "frboost/optim.hpp"

#include <cmath>

namespace frboost::optim {

OptimizerBase::OptimizerBase(const nn::ParamRegistry& reg) {
  for (const auto& kv : reg.params) {
    names_.push_back(kv.first);
    params_.push_back(kv.second);
    frozen_.push_back(0);
  }
}

void OptimizerBase::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void OptimizerBase::set_frozen_by_prefix(const std::vector<std::string>& prefixes, bool frozen) {
  for (size_t i = 0; i < names_.size(); ++i) {
    for (const auto& pre : prefixes) {
      if (names_[i].rfind(pre, 0) == 0) {
        frozen_[i] = frozen ? 1 : 0;
        break;
      }
    }
  }
}

void OptimizerBase::set_all_frozen(bool frozen) {
  for (auto& f : frozen_) f = frozen ? 1 : 0;
}

Adam::Adam(const nn::ParamRegistry& reg, double lr_, double beta1_, double beta2_, double eps_)
    : OptimizerBase(reg), lr(lr_), beta1(beta1_), beta2(beta2_), eps(eps_) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i] = Tensor(params_[i].shape());
    v_[i] = Tensor(params_[i].shape());
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    if (frozen_[i]) continue;
    const Tensor& g = params_[i].grad();
    if (g.empty()) continue;
    Tensor& val = params_[i].node->val;
    for (size_t k = 0; k < val.d.size(); ++k) {
      double gk = g.d[k];
      m_[i].d[k] = beta1 * m_[i].d[k] + (1.0 - beta1) * gk;
      v_[i].d[k] = beta2 * v_[i].d[k] + (1.0 - beta2) * gk * gk;
      double mh = m_[i].d[k] / c1;
      double vh = v_[i].d[k] / c2;
      val.d[k] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
}

Sgd::Sgd(const nn::ParamRegistry& reg, double lr_, double momentum_, double weight_decay_)
    : OptimizerBase(reg), lr(lr_), momentum(momentum_), weight_decay(weight_decay_) {
  vel_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) vel_[i] = Tensor(params_[i].shape());
}

void Sgd::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    if (frozen_[i]) continue;
    const Tensor& g = params_[i].grad();
    if (g.empty()) continue;
    Tensor& val = params_[i].node->val;
    for (size_t k = 0; k < val.d.size(); ++k) {
      double gk = g.d[k] + weight_decay * val.d[k];
      vel_[i].d[k] = momentum * vel_[i].d[k] + gk;
      val.d[k] -= lr * vel_[i].d[k];
    }
  }
}

double step_decay_lr(double lr0, int epoch, int drop_every, double factor) {
  int drops = drop_every > 0 ? epoch / drop_every : 0;
  return lr0 / std::pow(factor, static_cast<double>(drops));
}

}  // namespace frboost::optim
