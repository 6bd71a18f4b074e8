#include "stflow/verify.hpp"

#include <cmath>
#include <cstdio>

#include "stflow/model.hpp"
#include "stflow/oracles.hpp"

namespace stflow {

namespace {

ModelConfig compact(int levels, int steps, int size, int channels = 1) {
  ModelConfig c;
  c.in_channels = channels;
  c.height = size;
  c.width = size;
  c.levels = levels;
  c.steps = steps;
  c.hidden_channels = 8;
  c.coupling_hidden = 16;
  c.gated_hidden = 8;
  c.gated_layers = 2;
  return c;
}

Model perturbed(const ModelConfig& cfg, std::uint64_t seed, double stddev) {
  Model m = Model::build(cfg, seed);
  Rng rng(mix_seed(seed, 1));
  perturb_parameters(m.parameters(), rng, stddev);
  m.mark_initialized();
  return m;
}

MemoryState random_memory(const Model& m, Rng& rng) {
  const Shape shape = m.config().frame_shape();
  const std::vector<Tensor> ctx{uniform(shape, rng, 0, 1), uniform(shape, rng, 0, 1)};
  return m.encode_context(ctx);
}

CheckResult finish(std::string name, double measured, double tolerance, std::string detail) {
  return {std::move(name), measured, tolerance, std::isfinite(measured) && measured < tolerance, std::move(detail)};
}

}  // namespace

CheckResult check_round_trip(const VerifyOptions& options) {
  const std::pair<int, int> grid[] = {{1, 2}, {2, 2}, {2, 4}, {3, 4}};
  double worst = 0.0;
  std::string detail;
  for (ScaleAdapt adapt : {ScaleAdapt::pool, ScaleAdapt::conv}) {
    for (auto [levels, steps] : grid) {
      ModelConfig cfg = compact(levels, steps, 16);
      cfg.scale_adapt = adapt;
      const std::uint64_t seed = mix_seed(options.seed, levels * 10 + steps);
      const Model m = perturbed(cfg, seed, 0.05);
      Rng rng(mix_seed(seed, 2));
      const Tensor x = uniform({1, 16, 16}, rng, 0, 1);
      const MemoryState mem = random_memory(m, rng);
      const NllResult r = m.forward_nll(x, mem);
      Tensor back;
      if (options.corrupt_inverse) {
        Model broken = m.clone();
        Rng noise(mix_seed(seed, 3));
        perturb_parameters(broken.parameters(), noise, 1e-3);
        back = broken.reconstruct(r.latents, mem);
      } else {
        back = m.reconstruct(r.latents, mem);
      }
      const double err = max_abs_diff(back, x);
      worst = std::max(worst, err);
      char buf[96];
      std::snprintf(buf, sizeof buf, "%s(%d,%d)=%.3g ", adapt == ScaleAdapt::pool ? "pool" : "conv", levels, steps,
                    err);
      detail += buf;
    }
  }
  if (!detail.empty()) detail.pop_back();
  return finish("round_trip", worst, 1e-8, detail);
}

CheckResult check_logdet(const VerifyOptions& options) {
  const std::uint64_t seed = mix_seed(options.seed, 101);
  const Model m = perturbed(compact(1, 2, 4), seed, 0.1);
  Rng rng(mix_seed(seed, 2));
  const Tensor x = uniform({1, 4, 4}, rng, 0, 1);
  const MemoryState mem = random_memory(m, rng);
  const auto jac =
      numeric_jacobian([&](const Tensor& v) { return m.forward_nll(v, mem).latents.final_z; }, x, 1e-6);
  const double analytic = m.forward_nll(x, mem).logdet.item();
  const double numeric = log_abs_det(jac);
  char buf[128];
  std::snprintf(buf, sizeof buf, "analytic=%.12g numeric=%.12g dims=%d", analytic, numeric,
                static_cast<int>(jac.rows()));
  return finish("logdet_jacobian", std::abs(analytic - numeric), 1e-4, buf);
}

CheckResult check_gradients(const VerifyOptions& options) {
  ModelConfig cfg = compact(2, 1, 4);
  cfg.hidden_channels = 2;
  cfg.coupling_hidden = 3;
  cfg.gated_hidden = 2;
  cfg.gated_layers = 1;
  cfg.scale_adapt = ScaleAdapt::conv;
  const std::uint64_t seed = mix_seed(options.seed, 202);
  const Model m = perturbed(cfg, seed, 0.1);
  Rng rng(mix_seed(seed, 2));
  const std::vector<Tensor> ctx{uniform({1, 4, 4}, rng, 0, 1), uniform({1, 4, 4}, rng, 0, 1)};
  const Tensor x = uniform({1, 4, 4}, rng, 0, 1);
  auto objective = [&]() { return m.forward_nll(x, m.encode_context(ctx)).nll; };

  Graph graph;
  Tensor loss;
  {
    GraphScope scope(graph);
    loss = objective();
  }
  const Gradients grads = graph.backward(loss);
  double worst = 0.0;
  std::size_t count = 0;
  std::string worst_name;
  for (const auto& p : m.parameters()) {
    if (!p.trainable) continue;
    count += p.tensor.size();
    const Tensor analytic = grads.of(p.tensor);
    const Tensor saved = p.tensor.detach();
    Tensor target = p.tensor;
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& v) {
          std::copy(v.data().begin(), v.data().end(), target.mutable_data().begin());
          return objective().item();
        },
        saved, 1e-5);
    std::copy(saved.data().begin(), saved.data().end(), target.mutable_data().begin());
    const double err = max_relative_error(analytic, numeric, 1e-4);
    if (err > worst) {
      worst = err;
      worst_name = p.name;
    }
  }
  return finish("gradients", worst, 1e-4,
                "parameters=" + std::to_string(count) + " worst=" + (worst_name.empty() ? "none" : worst_name));
}

CheckResult check_density(const VerifyOptions& options) {
  ModelConfig cfg = compact(1, 2, 1, 2);
  cfg.squeeze = false;
  const std::uint64_t seed = mix_seed(options.seed, 303);
  const Model m = perturbed(cfg, seed, 0.3);
  Rng rng(mix_seed(seed, 2));
  const MemoryState mem = random_memory(m, rng);
  Tensor x({2, 1, 1});
  const double mass = integrate_2d(
      [&](double u, double v) {
        x.mutable_data()[0] = u;
        x.mutable_data()[1] = v;
        return std::exp(-m.forward_nll(x, mem).nll.item());
      },
      -10.0, 10.0, 200);
  char buf[64];
  std::snprintf(buf, sizeof buf, "mass=%.9f grid=200x200 on [-10,10]^2", mass);
  return finish("density_normalization", std::abs(mass - 1.0), 0.01, buf);
}

std::vector<CheckResult> run_verification(const VerifyOptions& options) {
  return {check_round_trip(options), check_logdet(options), check_gradients(options), check_density(options)};
}

std::string format_check(const CheckResult& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "CHECK name=%s measured=%.6g tolerance=%.6g status=%s", r.name.c_str(), r.measured,
                r.tolerance, r.pass ? "PASS" : "FAIL");
  std::string s = buf;
  if (!r.detail.empty()) s += " detail=\"" + r.detail + "\"";
  return s;
}

}  // namespace stflow
