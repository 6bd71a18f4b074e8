#include "stflow/nn.hpp"

#include <cmath>

namespace stflow {

Conv2dLayer Conv2dLayer::uniform_init(int in_channels, int out_channels, int kernel, Rng& rng, int stride) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels) * kernel * kernel);
  Conv2dLayer layer;
  layer.weight = uniform({out_channels, in_channels, kernel, kernel}, rng, -bound, bound);
  layer.weight.set_requires_grad(true);
  layer.bias = Tensor({out_channels}, 0.0);
  layer.bias.set_requires_grad(true);
  layer.padding = kernel / 2;
  layer.stride = stride;
  return layer;
}

Conv2dLayer Conv2dLayer::zeros(int in_channels, int out_channels, int kernel, int stride) {
  Conv2dLayer layer;
  layer.weight = Tensor({out_channels, in_channels, kernel, kernel}, 0.0);
  layer.weight.set_requires_grad(true);
  layer.bias = Tensor({out_channels}, 0.0);
  layer.bias.set_requires_grad(true);
  layer.padding = kernel / 2;
  layer.stride = stride;
  return layer;
}

void Conv2dLayer::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) {
    if (p.trainable) n += p.tensor.size();
  }
  return n;
}

void perturb_parameters(const ParamList& params, Rng& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  for (const auto& p : params) {
    if (!p.trainable) continue;
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v += normal(rng);
  }
}

}  // namespace stflow
