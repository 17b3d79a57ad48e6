#include "ct2rep/optim.hpp"

#include <cmath>

namespace ct2rep {

void adam_step(Tensor& param, AdamMoments& moments, double lr, const AdamHyper& hyper, std::int64_t step) {
  if (!param.has_grad()) throw ContractError("adam_step: parameter has no gradient");
  if (step < 1) throw ContractError("adam_step: step must be >= 1");
  const auto grad = param.grad();
  auto data = param.mutable_data();
  if (moments.m.size() != data.size()) {
    moments.m.assign(data.size(), 0.0);
    moments.v.assign(data.size(), 0.0);
  }
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < data.size(); ++i) {
    moments.m[i] = hyper.beta1 * moments.m[i] + (1.0 - hyper.beta1) * grad[i];
    moments.v[i] = hyper.beta2 * moments.v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
    const double m_hat = moments.m[i] / c1;
    const double v_hat = moments.v[i] / c2;
    data[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
}

std::size_t Adam::add_group(double lr) {
  lrs_.push_back(lr);
  return lrs_.size() - 1;
}

void Adam::add(std::string name, Tensor param, std::size_t group) {
  if (group >= lrs_.size()) throw ContractError("Adam::add: unknown parameter group");
  slots_.push_back(Slot{std::move(name), std::move(param), group, {}});
}

void Adam::step(double lr_scale) {
  ++step_;
  for (auto& slot : slots_) {
    if (!slot.param.has_grad()) continue;
    adam_step(slot.param, slot.moments, lrs_[slot.group] * lr_scale, hyper_, step_);
  }
}

void Adam::zero_grad() {
  for (auto& slot : slots_) slot.param.zero_grad();
}

}  // namespace ct2rep
