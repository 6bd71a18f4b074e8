#pragma once

// Invertible layers of the conditional multi-scale flow. Every layer maps a
// [C,H,W] representation forward (towards the latent, accumulating the log
// Jacobian determinant) and back (towards the data). Conditioning grids `h`
// must already match the spatial size of the representation they condition.

#include <span>
#include <vector>

#include "stflow/nn.hpp"
#include "stflow/tensor.hpp"

namespace stflow {

/// 0.5 * log(2*pi).
inline constexpr double kHalfLog2Pi = 0.91893853320467274178;

/// Offset inside the coupling scale, s = sigmoid(raw_s + offset).
inline constexpr double kCouplingScaleOffset = 2.0;

struct FactoredLatent {
  int scale = 0;
  Tensor z;
};

/// Representation threaded through the invertible stack.
struct FlowState {
  Tensor z;
  Tensor logdet;         // scalar, nats
  Tensor logprob_prior;  // scalar, nats
  std::vector<FactoredLatent> factored;

  static FlowState start(const Tensor& x);
};

struct LayerOutput {
  Tensor y;
  Tensor logdet;
};

struct GaussianStats {
  Tensor mean;
  Tensor log_sigma;
};

// --- conditional affine coupling -------------------------------------------

/// Scale/translation network: 3x3 conv -> ReLU -> 3x3 conv -> ReLU -> 1x1 conv.
/// The head is zero-initialized and emits (raw_s, t) stacked along channels.
struct CouplingParams {
  Conv2dLayer in;
  Conv2dLayer mid;
  Conv2dLayer head;

  static CouplingParams make(int channels, int cond_channels, int hidden, Rng& rng);
  /// Channels transformed by the coupling (the leading half).
  int transformed_channels() const { return head.out_channels() / 2; }
  void collect(ParamList& out, const std::string& prefix) const;
};

struct AffineCoefficients {
  Tensor scale;
  Tensor shift;
};

/// s = sigmoid(raw_s + 2) and t computed from the untouched half and h.
AffineCoefficients coupling_coefficients(const Tensor& untouched, const Tensor& h, const CouplingParams& p);
Tensor affine_forward(const Tensor& z0, const Tensor& scale, const Tensor& shift);
Tensor affine_inverse(const Tensor& y0, const Tensor& scale, const Tensor& shift);

LayerOutput coupling_forward(const Tensor& z, const Tensor& h, const CouplingParams& p);
Tensor coupling_inverse(const Tensor& y, const Tensor& h, const CouplingParams& p);

// --- invertible 1x1 convolution --------------------------------------------

/// W = P * L * (U + diag(sign * exp(log_s))) with P a fixed permutation,
/// L unit lower triangular and U strictly upper triangular.
struct Inv1x1Params {
  Tensor perm;            // [C], (P v)[i] = v[perm[i]], not trained
  Tensor lower;           // [C,C], strictly lower part used
  Tensor upper;           // [C,C], strictly upper part used
  Tensor log_s;           // [C]
  Tensor sign;            // [C], entries +-1, not trained

  /// LU factors of a random rotation.
  static Inv1x1Params random(int channels, Rng& rng);
  /// LU factors of an explicit row-major [C,C] matrix; throws if singular.
  static Inv1x1Params from_matrix(std::span<const double> w, int channels);

  int channels() const { return log_s.dim(0); }
  int perm_at(int i) const { return static_cast<int>(perm.at(static_cast<std::size_t>(i))); }
  void collect(ParamList& out, const std::string& prefix) const;
};

Tensor inv1x1_weight(const Inv1x1Params& p);
LayerOutput inv1x1_forward(const Tensor& z, const Inv1x1Params& p);
/// Undoes the channel mixing by triangular solves against the LU factors.
Tensor inv1x1_inverse(const Tensor& y, const Inv1x1Params& p);

// --- squeeze ----------------------------------------------------------------

inline Tensor squeeze(const Tensor& x) { return squeeze2x2(x); }
inline Tensor unsqueeze(const Tensor& x) { return unsqueeze2x2(x); }

// --- activation normalization ------------------------------------------------

/// Per-channel y = (z + bias) * exp(log_scale).
struct ActNormParams {
  Tensor bias;       // [C]
  Tensor log_scale;  // [C]
  bool initialized = false;

  static ActNormParams make(int channels);
  /// Zero mean, unit variance per channel over all given samples.
  void data_init(std::span<const Tensor> samples);
  void collect(ParamList& out, const std::string& prefix) const;
};

LayerOutput actnorm_forward(const Tensor& z, const ActNormParams& p);
Tensor actnorm_inverse(const Tensor& y, const ActNormParams& p);

// --- Gaussian priors --------------------------------------------------------

/// sum of log N(z; mean, exp(log_sigma)^2) over all elements, in nats.
Tensor gaussian_logprob(const Tensor& z, const Tensor& mean, const Tensor& log_sigma);
/// mean + temperature * exp(log_sigma) * eps with eps ~ N(0, I) drawn from rng.
Tensor gaussian_sample(const GaussianStats& stats, double temperature, Rng& rng);

/// A zero-initialized 3x3 convolution predicting (mean, log_sigma).
struct PriorParams {
  Conv2dLayer net;

  /// Prior over the factored half given the kept half and h.
  static PriorParams make_split(int channels, int cond_channels);
  /// Prior over the final latent given h only.
  static PriorParams make_final(int channels, int cond_channels);
  void collect(ParamList& out, const std::string& prefix) const;
};

struct SplitOutput {
  Tensor z0;  // continues through the flow
  Tensor z1;  // factored out
  Tensor logprob;
};

GaussianStats split_prior_stats(const Tensor& z0, const Tensor& h, const PriorParams& p);
SplitOutput split_prior_forward(const Tensor& z, const Tensor& h, const PriorParams& p);
/// Draws the factored half and returns concat(z0, z1).
Tensor split_prior_inverse(const Tensor& z0, const Tensor& h, const PriorParams& p, double temperature,
                           Rng& rng);
/// concat(z0, z1) with a known factored half.
Tensor split_prior_reconstruct(const Tensor& z0, const Tensor& z1);

GaussianStats conditional_prior_stats(const Tensor& h, const PriorParams& p);
Tensor conditional_prior_logprob(const Tensor& z, const Tensor& h, const PriorParams& p);
Tensor conditional_prior_sample(const Tensor& h, const PriorParams& p, double temperature, Rng& rng);

}  // namespace stflow
