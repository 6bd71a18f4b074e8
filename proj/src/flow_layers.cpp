#include "stflow/flow_layers.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "stflow/errors.hpp"

namespace stflow {

namespace {

using MatrixXd = Eigen::MatrixXd;

void require_spatial_match(const Tensor& z, const Tensor& h, const char* where) {
  if (h.rank() != 3 || z.rank() != 3 || h.dim(1) != z.dim(1) || h.dim(2) != z.dim(2)) {
    throw ShapeError(std::string(where) + ": conditioning " + shape_string(h.shape()) +
                     " does not match representation " + shape_string(z.shape()));
  }
}

Tensor with_grad(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

Inv1x1Params from_lu(const MatrixXd& w) {
  const int c = static_cast<int>(w.rows());
  Eigen::PartialPivLU<MatrixXd> lu(w);
  const MatrixXd packed = lu.matrixLU();
  const MatrixXd pt = lu.permutationP().transpose().toDenseMatrix().cast<double>();

  Inv1x1Params p;
  p.perm = Tensor({c}, 0.0);
  for (int i = 0; i < c; ++i) {
    for (int j = 0; j < c; ++j) {
      if (pt(i, j) == 1.0) p.perm.mutable_data()[i] = j;
    }
  }
  p.lower = Tensor({c, c}, 0.0);
  p.upper = Tensor({c, c}, 0.0);
  p.log_s = Tensor({c}, 0.0);
  p.sign = Tensor({c}, 1.0);
  auto lower = p.lower.mutable_data();
  auto upper = p.upper.mutable_data();
  for (int i = 0; i < c; ++i) {
    for (int j = 0; j < c; ++j) {
      if (j < i) lower[i * c + j] = packed(i, j);
      if (j > i) upper[i * c + j] = packed(i, j);
    }
    const double d = packed(i, i);
    if (d == 0.0 || !std::isfinite(d)) throw NumericError("1x1 convolution matrix is singular");
    p.log_s.mutable_data()[i] = std::log(std::abs(d));
    p.sign.mutable_data()[i] = d > 0 ? 1.0 : -1.0;
  }
  p.lower.set_requires_grad(true);
  p.upper.set_requires_grad(true);
  p.log_s.set_requires_grad(true);
  return p;
}

}  // namespace

FlowState FlowState::start(const Tensor& x) {
  FlowState s;
  s.z = x;
  s.logdet = Tensor::scalar(0.0);
  s.logprob_prior = Tensor::scalar(0.0);
  return s;
}

// --- coupling ---------------------------------------------------------------

CouplingParams CouplingParams::make(int channels, int cond_channels, int hidden, Rng& rng) {
  if (channels < 2) throw ShapeError("coupling needs at least 2 channels");
  const int transformed = channels / 2;
  const int untouched = channels - transformed;
  CouplingParams p;
  p.in = Conv2dLayer::uniform_init(untouched + cond_channels, hidden, 3, rng);
  p.mid = Conv2dLayer::uniform_init(hidden, hidden, 3, rng);
  p.head = Conv2dLayer::zeros(hidden, 2 * transformed, 1);
  return p;
}

void CouplingParams::collect(ParamList& out, const std::string& prefix) const {
  in.collect(out, prefix + ".in");
  mid.collect(out, prefix + ".mid");
  head.collect(out, prefix + ".head");
}

AffineCoefficients coupling_coefficients(const Tensor& untouched, const Tensor& h, const CouplingParams& p) {
  require_spatial_match(untouched, h, "coupling");
  const Tensor hidden = relu(p.mid(relu(p.in(concat({untouched, h})))));
  const int transformed = p.transformed_channels();
  auto [raw_s, shift] = split(p.head(hidden), transformed);
  return {sigmoid(add_scalar(raw_s, kCouplingScaleOffset)), shift};
}

Tensor affine_forward(const Tensor& z0, const Tensor& scale, const Tensor& shift) {
  return add(mul(z0, scale), shift);
}

Tensor affine_inverse(const Tensor& y0, const Tensor& scale, const Tensor& shift) {
  for (double s : scale.data()) {
    if (!(s > 0.0)) throw NumericError("coupling scale underflowed to zero");
  }
  return div(sub(y0, shift), scale);
}

LayerOutput coupling_forward(const Tensor& z, const Tensor& h, const CouplingParams& p) {
  if (z.rank() != 3 || z.dim(0) < 2) throw ShapeError("coupling needs [C>=2,H,W], got " + shape_string(z.shape()));
  const int transformed = p.transformed_channels();
  auto [z0, z1] = split(z, transformed);
  require_spatial_match(z1, h, "coupling");
  const Tensor hidden = relu(p.mid(relu(p.in(concat({z1, h})))));
  auto [raw_s, shift] = split(p.head(hidden), transformed);
  const Tensor shifted = add_scalar(raw_s, kCouplingScaleOffset);
  const Tensor y0 = affine_forward(z0, sigmoid(shifted), shift);
  return {concat({y0, z1}), sum(log_sigmoid(shifted))};
}

Tensor coupling_inverse(const Tensor& y, const Tensor& h, const CouplingParams& p) {
  if (y.rank() != 3 || y.dim(0) < 2) throw ShapeError("coupling needs [C>=2,H,W], got " + shape_string(y.shape()));
  auto [y0, y1] = split(y, p.transformed_channels());
  const auto coeffs = coupling_coefficients(y1, h, p);
  return concat({affine_inverse(y0, coeffs.scale, coeffs.shift), y1});
}

// --- invertible 1x1 convolution ---------------------------------------------

Inv1x1Params Inv1x1Params::random(int channels, Rng& rng) {
  if (channels < 1) throw ShapeError("1x1 convolution needs at least one channel");
  const Tensor g = randn({channels, channels}, rng);
  MatrixXd m(channels, channels);
  for (int i = 0; i < channels; ++i) {
    for (int j = 0; j < channels; ++j) m(i, j) = g.at(static_cast<std::size_t>(i) * channels + j);
  }
  Eigen::HouseholderQR<MatrixXd> qr(m);
  const MatrixXd q = qr.householderQ();
  return from_lu(q);
}

Inv1x1Params Inv1x1Params::from_matrix(std::span<const double> w, int channels) {
  if (channels < 1 || w.size() != static_cast<std::size_t>(channels) * channels) {
    throw ShapeError("1x1 convolution matrix must be CxC");
  }
  MatrixXd m(channels, channels);
  for (int i = 0; i < channels; ++i) {
    for (int j = 0; j < channels; ++j) m(i, j) = w[static_cast<std::size_t>(i) * channels + j];
  }
  return from_lu(m);
}

void Inv1x1Params::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".perm", perm, false});
  out.push_back({prefix + ".lower", lower, true});
  out.push_back({prefix + ".upper", upper, true});
  out.push_back({prefix + ".log_s", log_s, true});
  out.push_back({prefix + ".sign", sign, false});
}

Tensor inv1x1_weight(const Inv1x1Params& p) {
  const int c = p.channels();
  Tensor lower_mask({c, c}, 0.0), upper_mask({c, c}, 0.0), eye({c, c}, 0.0), perm({c, c}, 0.0);
  for (int i = 0; i < c; ++i) {
    for (int j = 0; j < c; ++j) {
      if (j < i) lower_mask.mutable_data()[i * c + j] = 1.0;
      if (j > i) upper_mask.mutable_data()[i * c + j] = 1.0;
    }
    eye.mutable_data()[i * c + i] = 1.0;
    perm.mutable_data()[i * c + p.perm_at(i)] = 1.0;
  }
  const Tensor l = add(mul(p.lower, lower_mask), eye);
  const Tensor u = add(mul(p.upper, upper_mask), diag_embed(mul(p.sign, exp(p.log_s))));
  return matmul(perm, matmul(l, u));
}

LayerOutput inv1x1_forward(const Tensor& z, const Inv1x1Params& p) {
  const int c = p.channels();
  if (z.rank() != 3 || z.dim(0) != c) {
    throw ShapeError("1x1 convolution expects " + std::to_string(c) + " channels, got " + shape_string(z.shape()));
  }
  const Tensor kernel = reshape(inv1x1_weight(p), {c, c, 1, 1});
  const double pixels = static_cast<double>(z.dim(1)) * z.dim(2);
  return {conv2d(z, kernel, Tensor(), 0), mul_scalar(sum(p.log_s), pixels)};
}

Tensor inv1x1_inverse(const Tensor& y, const Inv1x1Params& p) {
  const int c = p.channels();
  if (y.rank() != 3 || y.dim(0) != c) {
    throw ShapeError("1x1 convolution expects " + std::to_string(c) + " channels, got " + shape_string(y.shape()));
  }
  const std::size_t pixels = static_cast<std::size_t>(y.dim(1)) * y.dim(2);
  const auto lower = p.lower.data();
  const auto upper = p.upper.data();
  std::vector<double> diag(c);
  for (int i = 0; i < c; ++i) diag[i] = p.sign.at(i) * std::exp(p.log_s.at(i));

  const auto yv = y.data();
  std::vector<double> out(y.size());
  std::vector<double> a(c), b(c);
  for (std::size_t px = 0; px < pixels; ++px) {
    // a = P^T y
    for (int i = 0; i < c; ++i) a[p.perm_at(i)] = yv[i * pixels + px];
    // L b = a, unit diagonal
    for (int i = 0; i < c; ++i) {
      double acc = a[i];
      for (int j = 0; j < i; ++j) acc -= lower[i * c + j] * b[j];
      b[i] = acc;
    }
    // (U + D) z = b
    for (int i = c - 1; i >= 0; --i) {
      double acc = b[i];
      for (int j = i + 1; j < c; ++j) acc -= upper[i * c + j] * out[j * pixels + px];
      out[i * pixels + px] = acc / diag[i];
    }
  }
  return Tensor(y.shape(), std::move(out));
}

// --- activation normalization -----------------------------------------------

ActNormParams ActNormParams::make(int channels) {
  ActNormParams p;
  p.bias = with_grad(Tensor({channels}, 0.0));
  p.log_scale = with_grad(Tensor({channels}, 0.0));
  return p;
}

void ActNormParams::data_init(std::span<const Tensor> samples) {
  if (samples.empty()) throw ShapeError("actnorm data init needs at least one sample");
  const int c = bias.dim(0);
  std::vector<double> total(c, 0.0), total_sq(c, 0.0);
  double count = 0.0;
  for (const Tensor& s : samples) {
    if (s.rank() != 3 || s.dim(0) != c) throw ShapeError("actnorm init sample shape " + shape_string(s.shape()));
    const std::size_t pixels = static_cast<std::size_t>(s.dim(1)) * s.dim(2);
    for (int ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < pixels; ++i) {
        const double v = s.at(ch * pixels + i);
        total[ch] += v;
        total_sq[ch] += v * v;
      }
    }
    count += static_cast<double>(pixels);
  }
  for (int ch = 0; ch < c; ++ch) {
    const double m = total[ch] / count;
    const double var = std::max(total_sq[ch] / count - m * m, 0.0);
    bias.mutable_data()[ch] = -m;
    log_scale.mutable_data()[ch] = -std::log(std::max(std::sqrt(var), 1e-3));
  }
  initialized = true;
}

void ActNormParams::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".bias", bias, true});
  out.push_back({prefix + ".log_scale", log_scale, true});
}

LayerOutput actnorm_forward(const Tensor& z, const ActNormParams& p) {
  const double pixels = static_cast<double>(z.dim(1)) * z.dim(2);
  return {mul(add(z, p.bias), exp(p.log_scale)), mul_scalar(sum(p.log_scale), pixels)};
}

Tensor actnorm_inverse(const Tensor& y, const ActNormParams& p) {
  return sub(mul(y, exp(neg(p.log_scale))), p.bias);
}

// --- priors -----------------------------------------------------------------

Tensor gaussian_logprob(const Tensor& z, const Tensor& mean, const Tensor& log_sigma) {
  if (z.shape() != mean.shape() || z.shape() != log_sigma.shape()) {
    throw ShapeError("gaussian_logprob shapes " + shape_string(z.shape()) + ", " + shape_string(mean.shape()) +
                     ", " + shape_string(log_sigma.shape()));
  }
  if (!all_finite(log_sigma)) throw NumericError("gaussian_logprob: non-finite log_sigma");
  const Tensor scaled = mul(sub(z, mean), exp(neg(log_sigma)));
  const Tensor per_element = sub(mul_scalar(mul(scaled, scaled), -0.5), log_sigma);
  return add_scalar(sum(per_element), -kHalfLog2Pi * static_cast<double>(z.size()));
}

Tensor gaussian_sample(const GaussianStats& stats, double temperature, Rng& rng) {
  if (temperature < 0.0) throw NumericError("temperature must be >= 0");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(stats.mean.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double eps = normal(rng);
    out[i] = stats.mean.at(i) + temperature * std::exp(stats.log_sigma.at(i)) * eps;
  }
  return Tensor(stats.mean.shape(), std::move(out));
}

PriorParams PriorParams::make_split(int channels, int cond_channels) {
  if (channels % 2 != 0) throw ShapeError("split prior needs an even channel count");
  const int kept = channels / 2;
  return {Conv2dLayer::zeros(kept + cond_channels, 2 * (channels - kept), 3)};
}

PriorParams PriorParams::make_final(int channels, int cond_channels) {
  return {Conv2dLayer::zeros(cond_channels, 2 * channels, 3)};
}

void PriorParams::collect(ParamList& out, const std::string& prefix) const { net.collect(out, prefix + ".net"); }

GaussianStats split_prior_stats(const Tensor& z0, const Tensor& h, const PriorParams& p) {
  require_spatial_match(z0, h, "split prior");
  auto [mean, log_sigma] = split(p.net(concat({z0, h})), p.net.out_channels() / 2);
  return {mean, log_sigma};
}

SplitOutput split_prior_forward(const Tensor& z, const Tensor& h, const PriorParams& p) {
  if (z.rank() != 3 || z.dim(0) % 2 != 0) {
    throw ShapeError("split prior needs an even channel count, got " + shape_string(z.shape()));
  }
  auto [z0, z1] = split(z, z.dim(0) / 2);
  const auto stats = split_prior_stats(z0, h, p);
  return {z0, z1, gaussian_logprob(z1, stats.mean, stats.log_sigma)};
}

Tensor split_prior_inverse(const Tensor& z0, const Tensor& h, const PriorParams& p, double temperature,
                           Rng& rng) {
  const auto stats = split_prior_stats(z0, h, p);
  return concat({z0, gaussian_sample(stats, temperature, rng)});
}

Tensor split_prior_reconstruct(const Tensor& z0, const Tensor& z1) { return concat({z0, z1}); }

GaussianStats conditional_prior_stats(const Tensor& h, const PriorParams& p) {
  auto [mean, log_sigma] = split(p.net(h), p.net.out_channels() / 2);
  return {mean, log_sigma};
}

Tensor conditional_prior_logprob(const Tensor& z, const Tensor& h, const PriorParams& p) {
  require_spatial_match(z, h, "conditional prior");
  const auto stats = conditional_prior_stats(h, p);
  return gaussian_logprob(z, stats.mean, stats.log_sigma);
}

Tensor conditional_prior_sample(const Tensor& h, const PriorParams& p, double temperature, Rng& rng) {
  return gaussian_sample(conditional_prior_stats(h, p), temperature, rng);
}

}  // namespace stflow
