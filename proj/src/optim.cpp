#include "stflow/optim.hpp"

#include <cmath>

#include "stflow/errors.hpp"

namespace stflow {

double lr_at(const AdamConfig& config, std::uint64_t step) {
  if (config.decay_every == 0) return config.lr;
  return config.lr * std::pow(config.decay_rate, static_cast<double>(step / config.decay_every));
}

double ema_decay_at(const AdamConfig& config, std::uint64_t step) {
  if (!config.ema_warmup) return config.ema_decay;
  const double t = static_cast<double>(step);
  return std::min(config.ema_decay, (1.0 + t) / (10.0 + t));
}

AdamState AdamState::init(const ParamList& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.push_back(p.trainable ? Tensor(p.tensor.shape(), 0.0) : Tensor());
    s.v.push_back(p.trainable ? Tensor(p.tensor.shape(), 0.0) : Tensor());
    s.shadow.push_back(p.tensor.detach());
  }
  return s;
}

StepReport adam_step(const ParamList& params, const Gradients& grads, AdamState& state, const AdamConfig& config) {
  if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match the parameter list");
  std::vector<Tensor> g(params.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    g[i] = grads.of(params[i].tensor);
    for (double v : g[i].data()) {
      if (!std::isfinite(v)) throw NumericError("non-finite gradient for parameter " + params[i].name);
      sq += v * v;
    }
  }
  StepReport report;
  report.grad_norm = std::sqrt(sq);
  double scale = 1.0;
  if (config.clip_norm > 0.0 && report.grad_norm > config.clip_norm) {
    scale = config.clip_norm / report.grad_norm;
    report.clipped = true;
  }

  report.lr = lr_at(config, state.step);
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  const double decay = ema_decay_at(config, state.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    Tensor param = params[i].tensor;
    auto w = param.mutable_data();
    auto m = state.m[i].mutable_data();
    auto v = state.v[i].mutable_data();
    auto shadow = state.shadow[i].mutable_data();
    const auto gi = g[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = gi[k] * scale;
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      w[k] -= report.lr * mhat / (std::sqrt(vhat) + config.eps);
      shadow[k] = decay * shadow[k] + (1.0 - decay) * w[k];
    }
  }
  return report;
}

}  // namespace stflow
