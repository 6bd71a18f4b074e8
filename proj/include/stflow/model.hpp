#pragma once

// The conditional multi-scale flow: L scales of K steps each, every layer
// conditioned on the memory state of the conditioner.

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "stflow/conditioner.hpp"
#include "stflow/flow_layers.hpp"

namespace stflow {

enum class ScaleAdapt { pool, conv };

struct ModelConfig {
  int in_channels = 1;
  int height = 16;
  int width = 16;
  int levels = 2;           // L
  int steps = 2;            // K
  int hidden_channels = 32;  // conditioner memory channels
  int coupling_hidden = 64;
  int gated_hidden = 32;
  int gated_layers = 6;
  bool actnorm = true;
  bool squeeze = true;
  bool gated_residual = true;
  ScaleAdapt scale_adapt = ScaleAdapt::pool;
  double temperature = 1.0;
  double jitter = 0.0;

  /// Throws ConfigError on non-positive counts or indivisible dims.
  void validate() const;
  std::size_t frame_dims() const {
    return static_cast<std::size_t>(in_channels) * height * width;
  }
  Shape frame_shape() const { return {in_channels, height, width}; }
};

struct Latents {
  Tensor final_z;
  std::vector<FactoredLatent> factored;
};

struct NllResult {
  Tensor nll;      // scalar nats, -(logprob + logdet)
  Tensor logdet;   // scalar nats
  Tensor logprob;  // scalar nats
  Latents latents;
};

namespace layers {
struct Squeeze {};
struct ActNorm {
  ActNormParams p;
};
struct Inv1x1 {
  Inv1x1Params p;
};
struct Coupling {
  CouplingParams p;
};
struct Split {
  PriorParams p;
};
struct FinalPrior {
  PriorParams p;
};
}  // namespace layers

struct FlowLayer {
  std::variant<layers::Squeeze, layers::ActNorm, layers::Inv1x1, layers::Coupling, layers::Split,
               layers::FinalPrior>
      op;
  int scale = 1;  // 1-based scale the layer belongs to
  int level = 0;  // number of squeezes applied before this layer
  std::string name;
};

class Model {
 public:
  Model() = default;
  static Model build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Conditioner& conditioner() const { return conditioner_; }
  const std::vector<FlowLayer>& layers() const { return layers_; }

  MemoryState encode_context(std::span<const Tensor> frames) const { return conditioner_.encode(frames); }
  MemoryState lstm_step(const Tensor& x, const MemoryState& state) const { return conditioner_.step(x, state); }

  NllResult forward_nll(const Tensor& x, const MemoryState& memory) const;
  /// Inverts the stack with known latents.
  Tensor reconstruct(const Latents& latents, const MemoryState& memory) const;
  /// Draws every latent from its (temperature-scaled) prior and inverts.
  Tensor sample(const MemoryState& memory, double temperature, Rng& rng) const;
  /// [m, n, C, H, W]: each sample is fed back through the conditioner.
  Tensor rollout(std::span<const Tensor> context, int steps, int trajectories, double temperature, Rng& rng) const;

  /// Stable-named parameters; non-trainable buffers included and flagged.
  ParamList parameters() const;
  /// Copies values into the parameters in `parameters()` order.
  void assign(std::span<const Tensor> values);
  /// Independent copy with its own parameter storage.
  Model clone() const;

  /// Data-dependent actnorm initialization, layer by layer over the batch.
  void data_init(std::span<const Tensor> xs, std::span<const MemoryState> memories);
  bool initialized() const;
  void mark_initialized();

 private:
  std::vector<Tensor> scale_conditions(const MemoryState& memory) const;

  ModelConfig config_;
  Conditioner conditioner_;
  std::vector<ScaleAdapter> adapters_;  // per level, used when scale_adapt == conv
  std::vector<FlowLayer> layers_;
};

/// nll / (dims * ln 2).
double bits_per_dim(double nll, std::size_t dims);

}  // namespace stflow
