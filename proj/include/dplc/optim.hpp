#pragma once

#include <cstdint>
#include <vector>

#include "dplc/autodiff.hpp"
#include "dplc/tensor.hpp"

namespace dplc {

// Adam moment estimates for one parameter list. Stored in checkpoints so a
// resumed run continues the same trajectory.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;

  static AdamState for_params(const std::vector<ad::Var>& params);
  bool empty() const { return m.empty() && step == 0; }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam step, in place on the parameter values.
void adam_update(const std::vector<ad::Var>& params,
                 const std::vector<Tensor>& grads, AdamState& state,
                 const AdamConfig& cfg);

/// Gradients of a scalar loss for a parameter list, as plain tensors.
std::vector<Tensor> parameter_gradients(const ad::Var& loss,
                                        const std::vector<ad::Var>& params);

}  // namespace dplc
