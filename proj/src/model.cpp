#include "stflow/model.hpp"

#include <cmath>
#include <numbers>

#include "stflow/errors.hpp"

namespace stflow {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

void ModelConfig::validate() const {
  if (in_channels < 1 || height < 1 || width < 1) throw ConfigError("frame dims must be positive");
  if (levels < 1 || steps < 1) throw ConfigError("levels and steps must be >= 1");
  if (hidden_channels < 1 || coupling_hidden < 1 || gated_hidden < 1 || gated_layers < 0) {
    throw ConfigError("network widths must be positive");
  }
  if (!(temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
  if (!(jitter >= 0.0)) throw ConfigError("jitter must be >= 0");
  if (squeeze) {
    const int f = 1 << levels;
    if (height % f != 0 || width % f != 0) {
      throw ConfigError("frame " + std::to_string(height) + "x" + std::to_string(width) + " is not divisible by 2^" +
                        std::to_string(levels));
    }
  } else {
    int c = in_channels;
    for (int s = 1; s <= levels; ++s) {
      if (c < 2) throw ConfigError("without squeeze every scale needs at least 2 channels");
      if (s < levels) {
        if (c % 2 != 0) throw ConfigError("without squeeze the channel count must stay even across splits");
        c /= 2;
      }
    }
  }
}

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Model m;
  m.config_ = config;
  ConditionerConfig cc;
  cc.frame_channels = config.in_channels;
  cc.hidden_channels = config.hidden_channels;
  cc.gated_hidden = config.gated_hidden;
  cc.gated_layers = config.gated_layers;
  cc.residual = config.gated_residual;
  m.conditioner_ = Conditioner::make(cc, rng);

  const int ch = config.hidden_channels;
  int c = config.in_channels;
  int level = 0;
  for (int s = 1; s <= config.levels; ++s) {
    const std::string scale = "s" + std::to_string(s);
    if (config.squeeze) {
      m.layers_.push_back({layers::Squeeze{}, s, level, scale + ".squeeze"});
      c *= 4;
      ++level;
    }
    for (int k = 0; k < config.steps; ++k) {
      const std::string step = scale + ".k" + std::to_string(k);
      if (config.actnorm) m.layers_.push_back({layers::ActNorm{ActNormParams::make(c)}, s, level, step + ".actnorm"});
      m.layers_.push_back({layers::Inv1x1{Inv1x1Params::random(c, rng)}, s, level, step + ".inv1x1"});
      m.layers_.push_back(
          {layers::Coupling{CouplingParams::make(c, ch, config.coupling_hidden, rng)}, s, level, step + ".coupling"});
    }
    if (s < config.levels) {
      m.layers_.push_back({layers::Split{PriorParams::make_split(c, ch)}, s, level, scale + ".split"});
      c /= 2;
    } else {
      m.layers_.push_back({layers::FinalPrior{PriorParams::make_final(c, ch)}, s, level, scale + ".prior"});
    }
  }
  if (config.scale_adapt == ScaleAdapt::conv) {
    for (int l = 1; l <= level; ++l) m.adapters_.push_back(ScaleAdapter::make(ch, l));
  }
  return m;
}

std::vector<Tensor> Model::scale_conditions(const MemoryState& memory) const {
  if (memory.h.rank() != 3 || memory.h.dim(1) != config_.height || memory.h.dim(2) != config_.width) {
    throw ShapeError("memory state " + shape_string(memory.h.shape()) + " does not match the frame size");
  }
  const int max_level = config_.squeeze ? config_.levels : 0;
  std::vector<Tensor> hs;
  hs.reserve(max_level + 1);
  for (int l = 0; l <= max_level; ++l) {
    if (l > 0 && config_.scale_adapt == ScaleAdapt::conv) {
      hs.push_back(adapters_[l - 1](memory.h));
    } else {
      hs.push_back(state_for_scale(memory.h, l));
    }
  }
  return hs;
}

NllResult Model::forward_nll(const Tensor& x, const MemoryState& memory) const {
  if (x.shape() != config_.frame_shape()) {
    throw ShapeError("frame " + shape_string(x.shape()) + " does not match model input " +
                     shape_string(config_.frame_shape()));
  }
  const auto hs = scale_conditions(memory);
  Tensor z = x;
  Tensor logdet = Tensor::scalar(0.0);
  Tensor logprob = Tensor::scalar(0.0);
  Latents latents;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const FlowLayer& layer = layers_[i];
    const Tensor& h = hs[layer.level];
    try {
      std::visit(overloaded{
                     [&](const layers::Squeeze&) { z = squeeze(z); },
                     [&](const layers::ActNorm& l) {
                       auto out = actnorm_forward(z, l.p);
                       z = out.y;
                       logdet = add(logdet, out.logdet);
                     },
                     [&](const layers::Inv1x1& l) {
                       auto out = inv1x1_forward(z, l.p);
                       z = out.y;
                       logdet = add(logdet, out.logdet);
                     },
                     [&](const layers::Coupling& l) {
                       auto out = coupling_forward(z, h, l.p);
                       z = out.y;
                       logdet = add(logdet, out.logdet);
                     },
                     [&](const layers::Split& l) {
                       auto out = split_prior_forward(z, h, l.p);
                       latents.factored.push_back({layer.scale, out.z1});
                       z = out.z0;
                       logprob = add(logprob, out.logprob);
                     },
                     [&](const layers::FinalPrior& l) {
                       logprob = add(logprob, conditional_prior_logprob(z, h, l.p));
                       latents.final_z = z;
                     },
                 },
                 layer.op);
    } catch (const NumericError& e) {
      throw NumericError("layer " + std::to_string(i) + " (" + layer.name + "): " + e.what());
    }
  }
  NllResult r;
  r.nll = neg(add(logprob, logdet));
  r.logdet = logdet;
  r.logprob = logprob;
  r.latents = std::move(latents);
  return r;
}

Tensor Model::reconstruct(const Latents& latents, const MemoryState& memory) const {
  const auto hs = scale_conditions(memory);
  Tensor z = latents.final_z;
  std::size_t next_factored = latents.factored.size();
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const FlowLayer& layer = layers_[i];
    const Tensor& h = hs[layer.level];
    std::visit(overloaded{
                   [&](const layers::Squeeze&) { z = unsqueeze(z); },
                   [&](const layers::ActNorm& l) { z = actnorm_inverse(z, l.p); },
                   [&](const layers::Inv1x1& l) { z = inv1x1_inverse(z, l.p); },
                   [&](const layers::Coupling& l) { z = coupling_inverse(z, h, l.p); },
                   [&](const layers::Split&) {
                     if (next_factored == 0) throw ShapeError("missing factored latent");
                     z = split_prior_reconstruct(z, latents.factored[--next_factored].z);
                   },
                   [&](const layers::FinalPrior&) {},
               },
               layer.op);
  }
  return z;
}

Tensor Model::sample(const MemoryState& memory, double temperature, Rng& rng) const {
  if (temperature < 0.0) throw NumericError("temperature must be >= 0");
  const auto hs = scale_conditions(memory);
  Tensor z;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const FlowLayer& layer = layers_[i];
    const Tensor& h = hs[layer.level];
    std::visit(overloaded{
                   [&](const layers::Squeeze&) { z = unsqueeze(z); },
                   [&](const layers::ActNorm& l) { z = actnorm_inverse(z, l.p); },
                   [&](const layers::Inv1x1& l) { z = inv1x1_inverse(z, l.p); },
                   [&](const layers::Coupling& l) { z = coupling_inverse(z, h, l.p); },
                   [&](const layers::Split& l) { z = split_prior_inverse(z, h, l.p, temperature, rng); },
                   [&](const layers::FinalPrior& l) { z = conditional_prior_sample(h, l.p, temperature, rng); },
               },
               layer.op);
  }
  return z;
}

Tensor Model::rollout(std::span<const Tensor> context, int steps, int trajectories, double temperature,
                      Rng& rng) const {
  if (steps < 1 || trajectories < 1) throw ShapeError("rollout needs steps >= 1 and trajectories >= 1");
  const MemoryState start = encode_context(context);
  const std::size_t frame = config_.frame_dims();
  std::vector<double> out(static_cast<std::size_t>(trajectories) * steps * frame);
  for (int m = 0; m < trajectories; ++m) {
    MemoryState state = start;
    for (int n = 0; n < steps; ++n) {
      const Tensor x = sample(state, temperature, rng);
      std::copy(x.data().begin(), x.data().end(), out.begin() + (static_cast<std::size_t>(m) * steps + n) * frame);
      if (n + 1 < steps) state = lstm_step(x, state);
    }
  }
  return Tensor({trajectories, steps, config_.in_channels, config_.height, config_.width}, std::move(out));
}

ParamList Model::parameters() const {
  ParamList out;
  conditioner_.collect(out, "conditioner");
  for (const auto& a : adapters_) a.collect(out, "adapter" + std::to_string(a.level));
  for (const FlowLayer& layer : layers_) {
    std::visit(overloaded{
                   [&](const layers::Squeeze&) {},
                   [&](const layers::ActNorm& l) { l.p.collect(out, layer.name); },
                   [&](const layers::Inv1x1& l) { l.p.collect(out, layer.name); },
                   [&](const layers::Coupling& l) { l.p.collect(out, layer.name); },
                   [&](const layers::Split& l) { l.p.collect(out, layer.name); },
                   [&](const layers::FinalPrior& l) { l.p.collect(out, layer.name); },
               },
               layer.op);
  }
  return out;
}

void Model::assign(std::span<const Tensor> values) {
  ParamList params = parameters();
  if (values.size() != params.size()) {
    throw ShapeError("expected " + std::to_string(params.size()) + " parameter tensors, got " +
                     std::to_string(values.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& dst = params[i].tensor;
    if (values[i].shape() != dst.shape()) {
      throw ShapeError("parameter " + params[i].name + " has shape " + shape_string(dst.shape()) + ", got " +
                       shape_string(values[i].shape()));
    }
    auto src = values[i].data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

Model Model::clone() const {
  Model m = build(config_, 0);
  std::vector<Tensor> values;
  for (const auto& p : parameters()) values.push_back(p.tensor);
  m.assign(values);
  if (initialized()) m.mark_initialized();
  return m;
}

void Model::data_init(std::span<const Tensor> xs, std::span<const MemoryState> memories) {
  if (xs.empty() || xs.size() != memories.size()) throw ShapeError("data init needs matching frames and memories");
  std::vector<Tensor> zs(xs.begin(), xs.end());
  std::vector<std::vector<Tensor>> hs;
  for (const auto& mem : memories) hs.push_back(scale_conditions(mem));
  for (FlowLayer& layer : layers_) {
    if (auto* an = std::get_if<layers::ActNorm>(&layer.op); an && !an->p.initialized) an->p.data_init(zs);
    for (std::size_t b = 0; b < zs.size(); ++b) {
      Tensor& z = zs[b];
      const Tensor& h = hs[b][layer.level];
      std::visit(overloaded{
                     [&](const layers::Squeeze&) { z = squeeze(z); },
                     [&](const layers::ActNorm& l) { z = actnorm_forward(z, l.p).y; },
                     [&](const layers::Inv1x1& l) { z = inv1x1_forward(z, l.p).y; },
                     [&](const layers::Coupling& l) { z = coupling_forward(z, h, l.p).y; },
                     [&](const layers::Split& l) { z = split_prior_forward(z, h, l.p).z0; },
                     [&](const layers::FinalPrior&) {},
                 },
                 layer.op);
    }
  }
}

bool Model::initialized() const {
  for (const FlowLayer& layer : layers_) {
    if (auto* an = std::get_if<layers::ActNorm>(&layer.op); an && !an->p.initialized) return false;
  }
  return true;
}

void Model::mark_initialized() {
  for (FlowLayer& layer : layers_) {
    if (auto* an = std::get_if<layers::ActNorm>(&layer.op)) an->p.initialized = true;
  }
}

double bits_per_dim(double nll, std::size_t dims) {
  if (dims == 0) throw ShapeError("bits_per_dim needs dims > 0");
  return nll / (static_cast<double>(dims) * std::numbers::ln2);
}

}  // namespace stflow
