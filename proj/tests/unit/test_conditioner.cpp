#include "doctest.h"

#include <cmath>

#include "stflow/conditioner.hpp"
#include "stflow/errors.hpp"

using namespace stflow;

namespace {

constexpr double kH025 = 0.12245933120185457;   // tanh(0.25) * 0.5
constexpr double kH075 = 0.31757447619364365;   // tanh(0.75) * 0.5
constexpr double kH0375 = 0.17917869917539297;  // tanh(0.375) * 0.5

Conditioner silent_conditioner(int frame_channels, int hidden) {
  Rng rng(0);
  ConditionerConfig cfg;
  cfg.frame_channels = frame_channels;
  cfg.hidden_channels = hidden;
  cfg.gated_hidden = 4;
  cfg.gated_layers = 2;
  Conditioner c = Conditioner::make(cfg, rng);
  for (auto& v : c.net().last.weight.mutable_data()) v = 0.0;
  for (auto& v : c.net().last.bias.mutable_data()) v = 0.0;
  return c;
}

}  // namespace

TEST_CASE("concatenated relu") {
  const Tensor pos = crelu(Tensor({1, 1, 1}, 3.0));
  CHECK(pos.shape() == Shape{2, 1, 1});
  CHECK(pos.at(0) == 3.0);
  CHECK(pos.at(1) == 0.0);
  const Tensor negv = crelu(Tensor({1, 1, 1}, -3.0));
  CHECK(negv.at(0) == 0.0);
  CHECK(negv.at(1) == 3.0);
}

TEST_CASE("gated layer") {
  Rng rng(1);
  const Tensor x = randn({4, 16, 16}, rng);
  const auto zero = GatedConvLayer::zeros(4, true);
  CHECK(max_abs_diff(zero(x), x) == 0.0);
  const auto plain = GatedConvLayer::zeros(4, false);
  CHECK(max_abs_diff(plain(x), Tensor({4, 16, 16}, 0.0)) == 0.0);
  const auto layer = GatedConvLayer::make(4, true, rng);
  CHECK(layer(x).shape() == x.shape());
  CHECK_THROWS_AS(layer(Tensor({3, 16, 16})), ShapeError);
}

TEST_CASE("lstm update with zero pre-activations") {
  MemoryState prev;
  prev.c = Tensor({2, 3, 3}, 0.0);
  prev.h = Tensor({2, 3, 3}, 0.0);
  const Tensor gates({8, 3, 3}, 0.0);
  const auto a = lstm_update(gates, prev);
  CHECK(a.step == 1);
  for (double v : a.c.data()) CHECK(v == 0.25);
  for (double v : a.h.data()) CHECK(v == doctest::Approx(kH025).epsilon(1e-15));
  prev.c = Tensor({2, 3, 3}, 1.0);
  const auto b = lstm_update(gates, prev);
  for (double v : b.c.data()) CHECK(v == 0.75);
  for (double v : b.h.data()) CHECK(v == doctest::Approx(kH075).epsilon(1e-15));
  CHECK_THROWS_AS(lstm_update(Tensor({6, 3, 3}), prev), ShapeError);
}

TEST_CASE("hidden state stays inside (-1, 1)") {
  MemoryState prev;
  prev.c = Tensor({1, 2, 2}, 50.0);
  prev.h = Tensor({1, 2, 2}, 0.0);
  Rng rng(2);
  const auto s = lstm_update(mul_scalar(randn({4, 2, 2}, rng), 30.0), prev);
  for (double v : s.h.data()) CHECK(std::abs(v) < 1.0);

  ConditionerConfig cfg;
  cfg.hidden_channels = 3;
  cfg.gated_hidden = 4;
  cfg.gated_layers = 2;
  const auto cond = Conditioner::make(cfg, rng);
  const std::vector<Tensor> frames{mul_scalar(randn({1, 8, 8}, rng), 1e3), mul_scalar(randn({1, 8, 8}, rng), 1e3)};
  const auto encoded = cond.encode(frames);
  for (double v : encoded.h.data()) CHECK(std::abs(v) < 1.0);
}

TEST_CASE("context encoding") {
  const auto silent = silent_conditioner(1, 2);
  Rng rng(3);
  const Tensor f = randn({1, 4, 4}, rng);
  const std::vector<Tensor> one{f};
  const auto single = silent.encode(one);
  const auto stepped = silent.step(f, silent.zero_state(4, 4));
  CHECK(max_abs_diff(single.h, stepped.h) == 0.0);
  CHECK(max_abs_diff(single.c, stepped.c) == 0.0);

  const std::vector<Tensor> twice{f, f};
  const auto two = silent.encode(twice);
  CHECK(two.step == 2);
  for (double v : two.c.data()) CHECK(v == 0.375);
  for (double v : two.h.data()) CHECK(v == doctest::Approx(kH0375).epsilon(1e-15));

  ConditionerConfig cfg;
  cfg.hidden_channels = 3;
  cfg.gated_hidden = 4;
  cfg.gated_layers = 2;
  const auto cond = Conditioner::make(cfg, rng);
  const Tensor g = randn({1, 4, 4}, rng);
  const std::vector<Tensor> fg{f, g}, gf{g, f};
  CHECK(max_abs_diff(cond.encode(fg).h, cond.encode(gf).h) > 1e-6);
  CHECK(max_abs_diff(cond.encode(fg).h, cond.encode(fg).h) == 0.0);
  CHECK_THROWS_AS(cond.encode(std::vector<Tensor>{}), ShapeError);
  CHECK_THROWS_AS(cond.step(Tensor({1, 5, 4}), cond.zero_state(4, 4)), ShapeError);
}

TEST_CASE("scale adaptation") {
  Rng rng(4);
  const Tensor h = randn({2, 8, 8}, rng);
  CHECK(max_abs_diff(state_for_scale(h, 0), h) == 0.0);
  const Tensor constant({2, 8, 8}, 0.3);
  for (int l = 0; l <= 3; ++l) {
    const Tensor pooled = state_for_scale(constant, l);
    for (double v : pooled.data()) CHECK(v == doctest::Approx(0.3).epsilon(1e-15));
  }
  CHECK(state_for_scale(h, 2).shape() == Shape{2, 2, 2});
  CHECK(state_for_scale(Tensor({1, 2, 2}, std::vector<double>{1, 3, 5, 7}), 1).item() == 4.0);
  CHECK_THROWS_AS(state_for_scale(Tensor({1, 6, 6}), 2), ShapeError);
  for (int l = 1; l <= 2; ++l) {
    const auto adapter = ScaleAdapter::make(2, l);
    CHECK(adapter(h).shape() == state_for_scale(h, l).shape());
    CHECK(max_abs_diff(adapter(h), state_for_scale(h, l)) < 1e-15);
  }
  CHECK_THROWS_AS(ScaleAdapter::make(2, 0), ConfigError);
}

TEST_CASE("conditioner gradients match finite differences") {
  ConditionerConfig cfg;
  cfg.hidden_channels = 2;
  cfg.gated_hidden = 3;
  cfg.gated_layers = 1;
  Rng rng(5);
  const auto cond = Conditioner::make(cfg, rng);
  const std::vector<Tensor> frames{randn({1, 3, 3}, rng), randn({1, 3, 3}, rng)};
  const Tensor w = randn({2, 3, 3}, rng);
  auto objective = [&]() { return sum(mul(cond.encode(frames).h, w)); };
  ParamList params;
  cond.collect(params, "c");
  for (auto& np : params) {
    Graph g;
    Tensor loss;
    {
      GraphScope s(g);
      loss = objective();
    }
    const Tensor analytic = g.backward(loss).of(np.tensor);
    const Tensor saved = np.tensor.detach();
    Tensor target = np.tensor;
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& v) {
          std::copy(v.data().begin(), v.data().end(), target.mutable_data().begin());
          return objective().item();
        },
        saved, 1e-5);
    std::copy(saved.data().begin(), saved.data().end(), target.mutable_data().begin());
    INFO(np.name);
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double a = analytic.at(i), n = numeric.at(i);
      worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}));
    }
    CHECK(worst < 1e-4);
    if (np.name.find("last") != std::string::npos) CHECK(max_abs_diff(analytic, Tensor(analytic.shape())) > 0.0);
  }
}
