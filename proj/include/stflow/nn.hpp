#pragma once

// Parameter containers shared by the flow layers and the conditioner.

#include <string>
#include <vector>

#include "stflow/tensor.hpp"

namespace stflow {

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

using ParamList = std::vector<NamedTensor>;

/// A 2-D convolution with its own weight[Cout,Cin,k,k] and bias[Cout].
struct Conv2dLayer {
  Tensor weight;
  Tensor bias;
  int padding = 0;
  int stride = 1;

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias.
  static Conv2dLayer uniform_init(int in_channels, int out_channels, int kernel, Rng& rng, int stride = 1);
  /// All-zero weight and bias.
  static Conv2dLayer zeros(int in_channels, int out_channels, int kernel, int stride = 1);

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, padding, stride); }
  int in_channels() const { return weight.dim(1); }
  int out_channels() const { return weight.dim(0); }

  void collect(ParamList& out, const std::string& prefix) const;
};

std::size_t parameter_count(const ParamList& params);

/// Adds N(0, stddev^2) noise to every trainable tensor in place.
void perturb_parameters(const ParamList& params, Rng& rng, double stddev);

}  // namespace stflow
