#pragma once

// Adam with a step-wise learning-rate schedule and an exponential moving
// average (EMA) of the parameters.

#include <cstdint>
#include <vector>

#include "stflow/nn.hpp"
#include "stflow/tensor.hpp"

namespace stflow {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double ema_decay = 0.999;
  /// Use min(ema_decay, (1 + t) / (10 + t)) so early averages track the weights.
  bool ema_warmup = true;
  double decay_rate = 0.5;
  std::uint64_t decay_every = 200000;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

/// lr * decay_rate^floor(step / decay_every).
double lr_at(const AdamConfig& config, std::uint64_t step);

/// Buffers aligned with a ParamList; non-trainable entries keep empty moments.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::vector<Tensor> shadow;
  std::uint64_t step = 0;

  static AdamState init(const ParamList& params);
};

struct StepReport {
  double lr = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
};

/// One bias-corrected Adam update followed by the EMA update. Throws
/// NumericError (naming the parameter) on a non-finite gradient, leaving
/// parameters and state untouched.
StepReport adam_step(const ParamList& params, const Gradients& grads, AdamState& state, const AdamConfig& config);

/// EMA decay used at update number `step` (1-based).
double ema_decay_at(const AdamConfig& config, std::uint64_t step);

}  // namespace stflow
