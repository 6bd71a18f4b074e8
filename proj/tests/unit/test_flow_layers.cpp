#include "doctest.h"

#include <cmath>

#include "stflow/errors.hpp"
#include "stflow/flow_layers.hpp"
#include "stflow/oracles.hpp"

using namespace stflow;

namespace {

constexpr double kSigmoid2 = 0.88079707797788231;
constexpr double kLogSigmoid2 = -0.12692801104297263;

void perturb(Conv2dLayer& layer, Rng& rng, double scale) {
  auto w = layer.weight.mutable_data();
  for (auto& v : w) v = std::normal_distribution<double>(0.0, scale)(rng);
  auto b = layer.bias.mutable_data();
  for (auto& v : b) v = std::normal_distribution<double>(0.0, scale)(rng);
}

Tensor gradient_of(const std::function<Tensor()>& loss_fn, const Tensor& leaf) {
  Graph g;
  Tensor loss;
  {
    GraphScope s(g);
    loss = loss_fn();
  }
  return g.backward(loss).of(leaf);
}

}  // namespace

TEST_CASE("coupling at zero init scales by sigmoid(2)") {
  Rng rng(1);
  const auto p = CouplingParams::make(4, 3, 8, rng);
  const Tensor z = randn({4, 5, 6}, rng);
  const Tensor h = randn({3, 5, 6}, rng);
  const auto out = coupling_forward(z, h, p);
  for (std::size_t i = 0; i < 2 * 30; ++i) CHECK(out.y.at(i) == doctest::Approx(kSigmoid2 * z.at(i)).epsilon(1e-15));
  for (std::size_t i = 60; i < 120; ++i) CHECK(out.y.at(i) == z.at(i));
  CHECK(out.logdet.item() == doctest::Approx(30 * 2 * kLogSigmoid2).epsilon(1e-14));
}

TEST_CASE("affine coupling hand values") {
  const Tensor z0({1}, 2.0), s({1}, 3.0), t({1}, 1.0);
  CHECK(affine_forward(z0, s, t).item() == 7.0);
  CHECK(sum(log(s)).item() == doctest::Approx(1.0986122886681098).epsilon(1e-15));
  CHECK(affine_inverse(Tensor({1}, 7.0), s, t).item() == 2.0);
  const Tensor y({3}, std::vector<double>{3, 6, 9});
  const Tensor pure = affine_inverse(y, Tensor({3}, 3.0), Tensor({3}, 0.0));
  CHECK(pure.at(0) == 1.0);
  CHECK(pure.at(2) == 3.0);
  CHECK_THROWS_AS(affine_inverse(y, Tensor({3}, 0.0), Tensor({3}, 0.0)), NumericError);
}

TEST_CASE("coupling round trip and preconditions") {
  Rng rng(2);
  auto p = CouplingParams::make(4, 2, 16, rng);
  perturb(p.head, rng, 0.3);
  const Tensor z = randn({4, 8, 8}, rng);
  const Tensor h = randn({2, 8, 8}, rng);
  const auto out = coupling_forward(z, h, p);
  CHECK(max_abs_diff(coupling_inverse(out.y, h, p), z) < 1e-10);
  CHECK_THROWS_AS(coupling_forward(Tensor({1, 8, 8}), h, p), ShapeError);
  CHECK_THROWS_AS(coupling_forward(z, Tensor({2, 4, 4}), p), ShapeError);
  CHECK_THROWS_AS(CouplingParams::make(1, 2, 4, rng), ShapeError);

  // odd channel counts transform the leading floor(C/2) channels
  auto odd = CouplingParams::make(3, 2, 8, rng);
  perturb(odd.head, rng, 0.3);
  const Tensor z3 = randn({3, 4, 4}, rng);
  const Tensor h3 = randn({2, 4, 4}, rng);
  CHECK(max_abs_diff(coupling_inverse(coupling_forward(z3, h3, odd).y, h3, odd), z3) < 1e-10);
}

TEST_CASE("coupling log-det matches the Jacobian") {
  Rng rng(3);
  auto p = CouplingParams::make(2, 1, 6, rng);
  perturb(p.head, rng, 0.5);
  const Tensor z = randn({2, 3, 3}, rng);
  const Tensor h = randn({1, 3, 3}, rng);
  const auto jac = numeric_jacobian([&](const Tensor& v) { return coupling_forward(v, h, p).y; }, z, 1e-6);
  CHECK(std::abs(log_abs_det(jac) - coupling_forward(z, h, p).logdet.item()) < 1e-6);
}

TEST_CASE("invertible 1x1 convolution") {
  const Tensor eye({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto ident = Inv1x1Params::from_matrix(eye.data(), 3);
  Rng rng(4);
  const Tensor z = randn({3, 4, 4}, rng);
  const auto out = inv1x1_forward(z, ident);
  CHECK(max_abs_diff(out.y, z) == 0.0);
  CHECK(out.logdet.item() == 0.0);
  CHECK(max_abs_diff(inv1x1_inverse(z, ident), z) == 0.0);

  const std::vector<double> two{2.0};
  const auto dbl = Inv1x1Params::from_matrix(two, 1);
  const Tensor x = randn({1, 2, 2}, rng);
  const auto d = inv1x1_forward(x, dbl);
  for (std::size_t i = 0; i < 4; ++i) CHECK(d.y.at(i) == 2.0 * x.at(i));
  CHECK(d.logdet.item() == doctest::Approx(2.7725887222397811).epsilon(1e-15));
  const auto jac = numeric_jacobian([&](const Tensor& v) { return inv1x1_forward(v, dbl).y; }, x, 1e-6);
  CHECK(std::abs(log_abs_det(jac) - 2.7725887222397811) < 1e-9);
  const Tensor half = inv1x1_inverse(x, dbl);
  for (std::size_t i = 0; i < 4; ++i) CHECK(half.at(i) == x.at(i) / 2.0);

  const std::vector<double> singular{1, 2, 2, 4};
  CHECK_THROWS_AS(Inv1x1Params::from_matrix(singular, 2), NumericError);
}

TEST_CASE("1x1 weight reconstructs the factored matrix") {
  const std::vector<double> w{0.0, 2.0, -1.0, 1.0, 0.5, 0.0, 3.0, 0.0, 1.0};
  const auto p = Inv1x1Params::from_matrix(w, 3);
  const Tensor rebuilt = inv1x1_weight(p);
  for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(rebuilt.at(i) - w[i]) < 1e-14);
  // |det| = |0*(0.5) - 2*(1-0) + (-1)*(0-1.5)| = 0.5
  CHECK(sum(p.log_s).item() == doctest::Approx(std::log(0.5)).epsilon(1e-13));
}

TEST_CASE("random 1x1 log-det matches the assembled 36x36 Jacobian") {
  Rng rng(5);
  auto p = Inv1x1Params::random(4, rng);
  for (auto& v : p.log_s.mutable_data()) v += std::normal_distribution<double>(0.0, 0.3)(rng);
  for (auto& v : p.lower.mutable_data()) v += std::normal_distribution<double>(0.0, 0.3)(rng);
  const Tensor z = randn({4, 3, 3}, rng);
  const auto jac = numeric_jacobian([&](const Tensor& v) { return inv1x1_forward(v, p).y; }, z, 1e-6);
  CHECK(jac.rows() == 36);
  CHECK(std::abs(log_abs_det(jac) - inv1x1_forward(z, p).logdet.item()) < 1e-6);
  CHECK(max_abs_diff(inv1x1_inverse(inv1x1_forward(z, p).y, p), z) < 1e-10);
}

TEST_CASE("actnorm") {
  Rng rng(6);
  auto p = ActNormParams::make(2);
  std::vector<Tensor> batch{add_scalar(mul_scalar(randn({2, 4, 4}, rng), 3.0), 5.0),
                            add_scalar(mul_scalar(randn({2, 4, 4}, rng), 3.0), 5.0)};
  p.data_init(batch);
  CHECK(p.initialized);
  double total = 0.0, total_sq = 0.0;
  for (const auto& b : batch) {
    const Tensor y = actnorm_forward(b, p).y;
    for (std::size_t i = 0; i < 16; ++i) {
      total += y.at(i);
      total_sq += y.at(i) * y.at(i);
    }
  }
  CHECK(std::abs(total / 32) < 1e-12);
  CHECK(std::abs(total_sq / 32 - 1.0) < 1e-12);
  const auto out = actnorm_forward(batch[0], p);
  CHECK(out.logdet.item() == doctest::Approx(16 * sum(p.log_scale).item()).epsilon(1e-14));
  CHECK(max_abs_diff(actnorm_inverse(out.y, p), batch[0]) < 1e-12);
  const auto jac = numeric_jacobian([&](const Tensor& v) { return actnorm_forward(v, p).y; }, batch[1], 1e-6);
  CHECK(std::abs(log_abs_det(jac) - out.logdet.item()) < 1e-6);
}

TEST_CASE("gaussian log density") {
  const Tensor z({5}, 0.3);
  CHECK(gaussian_logprob(z, z, Tensor({5}, 0.0)).item() == doctest::Approx(-0.91893853320467267 * 5).epsilon(1e-15));
  const double sigma = 0.7;
  const Tensor one_z({1}, 1.2 + sigma), mu({1}, 1.2), ls({1}, std::log(sigma));
  CHECK(gaussian_logprob(one_z, mu, ls).item() ==
        doctest::Approx(-0.91893853320467267 - std::log(sigma) - 0.5).epsilon(1e-14));
  CHECK_THROWS_AS(gaussian_logprob(one_z, mu, Tensor({1}, INFINITY)), Error);

  // midpoint quadrature over [-8, 8]
  const int n = 16000;
  const double step = 16.0 / n;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const Tensor v({1}, -8.0 + (i + 0.5) * step);
    total += std::exp(gaussian_logprob(v, Tensor({1}, 0.0), Tensor({1}, 0.0)).item());
  }
  CHECK(std::abs(total * step - 1.0) < 1e-6);
}

TEST_CASE("split prior") {
  Rng rng(7);
  const auto p = PriorParams::make_split(4, 2);
  const Tensor z = randn({4, 3, 3}, rng);
  const Tensor h = randn({2, 3, 3}, rng);
  const auto out = split_prior_forward(z, h, p);
  CHECK(out.z0.shape() == Shape{2, 3, 3});
  const Tensor z1 = slice(z, 2, 4);
  double expected = -0.91893853320467267 * 18;
  for (double v : z1.data()) expected -= 0.5 * v * v;
  CHECK(out.logprob.item() == doctest::Approx(expected).epsilon(1e-14));
  CHECK(max_abs_diff(split_prior_reconstruct(out.z0, out.z1), z) == 0.0);
  CHECK_THROWS_AS(split_prior_forward(Tensor({3, 3, 3}), h, p), ShapeError);

  auto q = PriorParams::make_split(4, 2);
  perturb(q.net, rng, 0.2);
  const auto stats = split_prior_stats(out.z0, h, q);
  Rng a(11);
  const Tensor zero_t = split_prior_inverse(out.z0, h, q, 0.0, a);
  CHECK(max_abs_diff(slice(zero_t, 2, 4), stats.mean) == 0.0);
  Rng r1(12), r2(12);
  CHECK(max_abs_diff(split_prior_inverse(out.z0, h, q, 1.0, r1), split_prior_inverse(out.z0, h, q, 1.0, r2)) == 0.0);
  CHECK_THROWS_AS(split_prior_inverse(out.z0, h, q, -1.0, r1), NumericError);
}

TEST_CASE("prior draws have the predicted spread") {
  GaussianStats stats{Tensor({1}, 0.4), Tensor({1}, std::log(0.5))};
  Rng rng(13);
  const int n = 10000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = gaussian_sample(stats, 1.0, rng).item();
    s += v;
    s2 += v * v;
  }
  const double mean = s / n;
  const double sd = std::sqrt(s2 / n - mean * mean);
  CHECK(std::abs(sd - 0.5) / 0.5 < 0.03);
}

TEST_CASE("conditional prior") {
  Rng rng(8);
  const auto p = PriorParams::make_final(3, 2);
  const Tensor h = randn({2, 2, 2}, rng);
  const Tensor z = randn({3, 2, 2}, rng);
  double expected = -0.91893853320467267 * 12;
  for (double v : z.data()) expected -= 0.5 * v * v;
  CHECK(conditional_prior_logprob(z, h, p).item() == doctest::Approx(expected).epsilon(1e-14));

  auto q = PriorParams::make_final(3, 2);
  perturb(q.net, rng, 0.2);
  const auto stats = conditional_prior_stats(h, q);
  CHECK(conditional_prior_logprob(stats.mean, h, q).item() ==
        doctest::Approx(-0.91893853320467267 * 12 - sum(stats.log_sigma).item()).epsilon(1e-13));
  Rng a(1);
  CHECK(max_abs_diff(conditional_prior_sample(h, q, 0.0, a), stats.mean) == 0.0);
}

TEST_CASE("layer gradients match finite differences") {
  Rng rng(9);
  auto p = CouplingParams::make(2, 1, 4, rng);
  perturb(p.head, rng, 0.3);
  auto prior = PriorParams::make_final(2, 1);
  perturb(prior.net, rng, 0.2);
  auto inv = Inv1x1Params::random(2, rng);
  const Tensor z = randn({2, 3, 3}, rng);
  const Tensor h = randn({1, 3, 3}, rng);
  auto objective = [&]() {
    const auto a = inv1x1_forward(z, inv);
    const auto b = coupling_forward(a.y, h, p);
    return add(add(a.logdet, b.logdet), conditional_prior_logprob(b.y, h, prior));
  };
  ParamList params;
  p.collect(params, "c");
  prior.collect(params, "p");
  inv.collect(params, "i");
  for (auto& np : params) {
    if (!np.trainable) continue;
    const Tensor analytic = gradient_of(objective, np.tensor);
    Tensor& target = np.tensor;
    const Tensor saved = target.detach();
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& v) {
          std::copy(v.data().begin(), v.data().end(), target.mutable_data().begin());
          return objective().item();
        },
        saved, 1e-5);
    std::copy(saved.data().begin(), saved.data().end(), target.mutable_data().begin());
    INFO(np.name);
    CHECK(max_relative_error(analytic, numeric, 1e-6) < 1e-4);
  }
}

TEST_CASE("per-layer bijectivity at several shapes") {
  for (const Shape& shape : {Shape{1, 8, 8}, Shape{2, 8, 8}, Shape{4, 16, 16}}) {
    Rng rng(10);
    const Tensor z = randn(shape, rng);
    const int c = shape[0];
    const auto inv = Inv1x1Params::random(c, rng);
    CHECK(max_abs_diff(inv1x1_inverse(inv1x1_forward(z, inv).y, inv), z) < 1e-8);
    CHECK(max_abs_diff(unsqueeze(squeeze(z)), z) == 0.0);
    auto an = ActNormParams::make(c);
    an.data_init(std::span<const Tensor>(&z, 1));
    CHECK(max_abs_diff(actnorm_inverse(actnorm_forward(z, an).y, an), z) < 1e-8);
    if (c >= 2) {
      auto cp = CouplingParams::make(c, 2, 8, rng);
      perturb(cp.head, rng, 0.3);
      const Tensor h = randn({2, shape[1], shape[2]}, rng);
      CHECK(max_abs_diff(coupling_inverse(coupling_forward(z, h, cp).y, h, cp), z) < 1e-8);
    }
  }
}
