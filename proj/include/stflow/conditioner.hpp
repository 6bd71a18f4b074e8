#pragma once

// Convolutional LSTM memory over past frames. A gated convolutional network
// maps (previous frame, previous hidden state) to the four gate
// pre-activations, and the cell/hidden update follows
//   c = sigmoid(g) * sigmoid(i) + c_prev * sigmoid(f)
//   h = tanh(c) * sigmoid(o)

#include <span>
#include <vector>

#include "stflow/nn.hpp"
#include "stflow/tensor.hpp"

namespace stflow {

struct MemoryState {
  Tensor h;  // [Ch,H,W]
  Tensor c;  // [Ch,H,W]
  int step = 0;
};

/// Concatenated ReLU along channels: [relu(x), relu(-x)].
Tensor crelu(const Tensor& x);

/// conv3x3 -> crelu -> conv3x3 to (value, gate) -> value * sigmoid(gate),
/// plus the input when the residual connection is enabled.
struct GatedConvLayer {
  Conv2dLayer conv_in;   // Hg -> Hg
  Conv2dLayer conv_out;  // 2Hg -> 2Hg
  bool residual = true;

  static GatedConvLayer make(int channels, bool residual, Rng& rng);
  static GatedConvLayer zeros(int channels, bool residual);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct GatedConvNet {
  Conv2dLayer first;  // (Cx + Ch) -> Hg
  std::vector<GatedConvLayer> layers;
  Conv2dLayer last;   // Hg -> 4 Ch, gate order (g, i, f, o)

  static GatedConvNet make(int in_channels, int hidden, int gate_channels, int n_layers, bool residual, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Cell/hidden update from stacked gate pre-activations [4Ch,H,W].
MemoryState lstm_update(const Tensor& gates, const MemoryState& prev);

struct ConditionerConfig {
  int frame_channels = 1;
  int hidden_channels = 32;
  int gated_hidden = 32;
  int gated_layers = 6;
  bool residual = true;
};

class Conditioner {
 public:
  Conditioner() = default;
  static Conditioner make(const ConditionerConfig& config, Rng& rng);

  const ConditionerConfig& config() const { return config_; }
  MemoryState zero_state(int height, int width) const;
  MemoryState step(const Tensor& x_prev, const MemoryState& state) const;
  /// Folds `step` over the frames in chronological order.
  MemoryState encode(std::span<const Tensor> frames, const MemoryState& init) const;
  MemoryState encode(std::span<const Tensor> frames) const;

  GatedConvNet& net() { return net_; }
  const GatedConvNet& net() const { return net_; }
  void collect(ParamList& out, const std::string& prefix) const { net_.collect(out, prefix); }

 private:
  ConditionerConfig config_;
  GatedConvNet net_;
};

/// Average-pools h by 2^level in both spatial dims.
Tensor state_for_scale(const Tensor& h, int level);

/// Learned alternative to plain pooling: a convolution with a 2^l x 2^l
/// kernel and stride 2^l, computed as l space-to-depth steps followed by a
/// 1x1 convolution. Starts out equal to average pooling.
struct ScaleAdapter {
  int level = 1;
  Conv2dLayer proj;

  static ScaleAdapter make(int channels, int level);
  Tensor operator()(const Tensor& h) const;
  void collect(ParamList& out, const std::string& prefix) const { proj.collect(out, prefix + ".proj"); }
};

}  // namespace stflow
