#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ct2rep/tensor.hpp"

namespace ct2rep {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

// One bias-corrected Adam update of `param` in place. `step` is 1-based.
// Throws ContractError when the parameter has no gradient.
void adam_step(Tensor& param, AdamMoments& moments, double lr, const AdamHyper& hyper, std::int64_t step);

// Adam over named parameters split into learning-rate groups.
class Adam {
 public:
  struct Slot {
    std::string name;
    Tensor param;
    std::size_t group = 0;
    AdamMoments moments;
  };

  explicit Adam(AdamHyper hyper = {}) : hyper_(hyper) {}

  std::size_t add_group(double lr);
  void add(std::string name, Tensor param, std::size_t group);

  // Applies one update to every parameter that received a gradient;
  // parameters untouched by the last backward pass are skipped.
  void step(double lr_scale = 1.0);
  void zero_grad();

  std::int64_t steps_taken() const { return step_; }
  void set_steps_taken(std::int64_t s) { step_ = s; }
  const std::vector<double>& group_lrs() const { return lrs_; }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }
  const AdamHyper& hyper() const { return hyper_; }

 private:
  AdamHyper hyper_;
  std::vector<double> lrs_;
  std::vector<Slot> slots_;
  std::int64_t step_ = 0;
};

}  // namespace ct2rep
