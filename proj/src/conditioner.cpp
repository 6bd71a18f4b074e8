#include "stflow/conditioner.hpp"

#include <algorithm>

#include "stflow/errors.hpp"

namespace stflow {

Tensor crelu(const Tensor& x) { return concat({relu(x), relu(neg(x))}); }

GatedConvLayer GatedConvLayer::make(int channels, bool residual, Rng& rng) {
  GatedConvLayer l;
  l.conv_in = Conv2dLayer::uniform_init(channels, channels, 3, rng);
  l.conv_out = Conv2dLayer::uniform_init(2 * channels, 2 * channels, 3, rng);
  l.residual = residual;
  return l;
}

GatedConvLayer GatedConvLayer::zeros(int channels, bool residual) {
  GatedConvLayer l;
  l.conv_in = Conv2dLayer::zeros(channels, channels, 3);
  l.conv_out = Conv2dLayer::zeros(2 * channels, 2 * channels, 3);
  l.residual = residual;
  return l;
}

Tensor GatedConvLayer::operator()(const Tensor& x) const {
  if (x.rank() != 3 || x.dim(0) != conv_in.in_channels()) {
    throw ShapeError("gated layer expects " + std::to_string(conv_in.in_channels()) + " channels, got " +
                     shape_string(x.shape()));
  }
  const Tensor stacked = conv_out(crelu(conv_in(x)));
  auto [value, gate] = split(stacked, stacked.dim(0) / 2);
  Tensor out = mul(value, sigmoid(gate));
  if (residual && out.shape() == x.shape()) out = add(out, x);
  return out;
}

void GatedConvLayer::collect(ParamList& out, const std::string& prefix) const {
  conv_in.collect(out, prefix + ".conv_in");
  conv_out.collect(out, prefix + ".conv_out");
}

GatedConvNet GatedConvNet::make(int in_channels, int hidden, int gate_channels, int n_layers, bool residual,
                                 Rng& rng) {
  GatedConvNet net;
  net.first = Conv2dLayer::uniform_init(in_channels, hidden, 3, rng);
  for (int i = 0; i < n_layers; ++i) net.layers.push_back(GatedConvLayer::make(hidden, residual, rng));
  net.last = Conv2dLayer::uniform_init(hidden, gate_channels, 3, rng);
  return net;
}

Tensor GatedConvNet::operator()(const Tensor& x) const {
  Tensor a = first(x);
  for (const auto& layer : layers) a = layer(a);
  return last(a);
}

void GatedConvNet::collect(ParamList& out, const std::string& prefix) const {
  first.collect(out, prefix + ".first");
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + ".gated" + std::to_string(i));
  last.collect(out, prefix + ".last");
}

MemoryState lstm_update(const Tensor& gates, const MemoryState& prev) {
  const int ch = prev.c.dim(0);
  if (gates.rank() != 3 || gates.dim(0) != 4 * ch || gates.dim(1) != prev.c.dim(1) ||
      gates.dim(2) != prev.c.dim(2)) {
    throw ShapeError("gate stack " + shape_string(gates.shape()) + " does not fit cell " +
                     shape_string(prev.c.shape()));
  }
  const Tensor g = slice(gates, 0, ch);
  const Tensor i = slice(gates, ch, 2 * ch);
  const Tensor f = slice(gates, 2 * ch, 3 * ch);
  const Tensor o = slice(gates, 3 * ch, 4 * ch);
  MemoryState next;
  next.c = add(mul(sigmoid(g), sigmoid(i)), mul(prev.c, sigmoid(f)));
  next.h = mul(tanh(next.c), sigmoid(o));
  next.step = prev.step + 1;
  return next;
}

Conditioner Conditioner::make(const ConditionerConfig& config, Rng& rng) {
  if (config.frame_channels < 1 || config.hidden_channels < 1 || config.gated_hidden < 1 || config.gated_layers < 0) {
    throw ConfigError("conditioner widths must be positive");
  }
  Conditioner c;
  c.config_ = config;
  c.net_ = GatedConvNet::make(config.frame_channels + config.hidden_channels, config.gated_hidden,
                              4 * config.hidden_channels, config.gated_layers, config.residual, rng);
  return c;
}

MemoryState Conditioner::zero_state(int height, int width) const {
  MemoryState s;
  s.h = Tensor({config_.hidden_channels, height, width}, 0.0);
  s.c = Tensor({config_.hidden_channels, height, width}, 0.0);
  return s;
}

MemoryState Conditioner::step(const Tensor& x_prev, const MemoryState& state) const {
  if (x_prev.rank() != 3 || x_prev.dim(0) != config_.frame_channels || x_prev.dim(1) != state.h.dim(1) ||
      x_prev.dim(2) != state.h.dim(2)) {
    throw ShapeError("frame " + shape_string(x_prev.shape()) + " does not fit memory " +
                     shape_string(state.h.shape()));
  }
  return lstm_update(net_(concat({x_prev, state.h})), state);
}

MemoryState Conditioner::encode(std::span<const Tensor> frames, const MemoryState& init) const {
  if (frames.empty()) throw ShapeError("context must hold at least one frame");
  MemoryState s = init;
  for (const Tensor& f : frames) s = step(f, s);
  return s;
}

MemoryState Conditioner::encode(std::span<const Tensor> frames) const {
  if (frames.empty()) throw ShapeError("context must hold at least one frame");
  return encode(frames, zero_state(frames.front().dim(1), frames.front().dim(2)));
}

Tensor state_for_scale(const Tensor& h, int level) {
  if (level < 0) throw ShapeError("scale level must be >= 0");
  if (level == 0) return h;
  return avg_pool(h, 1 << level);
}

ScaleAdapter ScaleAdapter::make(int channels, int level) {
  if (level < 1) throw ConfigError("scale adapters start at level 1");
  const int block = 1 << level;
  const int wide = channels * block * block;
  ScaleAdapter a{level, Conv2dLayer::zeros(wide, channels, 1)};
  auto w = a.proj.weight.mutable_data();
  for (int c = 0; c < channels; ++c) {
    std::vector<double> probe(static_cast<std::size_t>(channels) * block * block, 0.0);
    std::fill(probe.begin() + static_cast<std::ptrdiff_t>(c) * block * block,
              probe.begin() + static_cast<std::ptrdiff_t>(c + 1) * block * block, 1.0);
    Tensor t({channels, block, block}, std::move(probe));
    for (int l = 0; l < level; ++l) t = squeeze2x2(t);
    for (int j = 0; j < wide; ++j) {
      if (t.at(static_cast<std::size_t>(j)) != 0.0) w[static_cast<std::size_t>(c) * wide + j] = 1.0 / (block * block);
    }
  }
  return a;
}

Tensor ScaleAdapter::operator()(const Tensor& h) const {
  Tensor t = h;
  for (int l = 0; l < level; ++l) t = squeeze2x2(t);
  return proj(t);
}

}  // namespace stflow
