#pragma once

// Central-difference gradient checks against the tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ct2rep/rng.hpp"
#include "ct2rep/tensor.hpp"

namespace ct2rep::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<param index>[<element>] analytic numeric"
  std::size_t checked = 0;
};

// Elementwise |a - n| / max(|a|, |n|, floor).
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = rng.uniform(-scale, scale);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

// Compares tape gradients of loss() with respect to every element of every
// param (or `samples` random elements per param when samples > 0).
inline GradCheckResult grad_check(const std::vector<Tensor>& params, const std::function<Tensor()>& loss,
                                  double h = 1e-5, std::size_t samples = 0, std::uint64_t seed = 7) {
  for (auto p : params) p.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    backward(loss(), tape);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                       : std::vector<double>(p.numel(), 0.0));
  }
  GradCheckResult r;
  Rng rng(seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    std::vector<std::size_t> idx;
    if (samples == 0 || samples >= p.numel()) {
      for (std::size_t i = 0; i < p.numel(); ++i) idx.push_back(i);
    } else {
      for (std::size_t s = 0; s < samples; ++s) idx.push_back(rng.below(p.numel()));
    }
    for (std::size_t i : idx) {
      auto data = p.mutable_data();
      const double orig = data[i];
      data[i] = orig + h;
      const double up = loss().item();
      data[i] = orig - h;
      const double down = loss().item();
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double e = rel_error(analytic[k][i], numeric);
      ++r.checked;
      if (e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = std::to_string(k) + "[" + std::to_string(i) + "] " + std::to_string(analytic[k][i]) + " " +
                  std::to_string(numeric);
      }
    }
  }
  return r;
}

// sum(op(x) ⊙ W) for a fixed random W, so every output element matters.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

}  // namespace ct2rep::testing
