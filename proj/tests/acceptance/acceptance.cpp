// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--out DIR] [ID ...]
//
// IDs are 1..10; all criteria run when none are given.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stflow/image.hpp"
#include "stflow/metrics.hpp"
#include "stflow/pipeline.hpp"
#include "stflow/verify.hpp"

using namespace stflow;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string measured;
};

struct Criterion {
  int id;
  const char* name;
  double time_limit;  // seconds
  std::function<Outcome(const fs::path&)> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Model used by the training criteria: 16x16, two scales, two steps each.
RunConfig small_config() {
  RunConfig c;
  c.model.hidden_channels = 16;
  c.model.gated_hidden = 16;
  c.model.gated_layers = 2;
  c.model.coupling_hidden = 32;
  c.train.batch = 8;
  return c;
}

Outcome from_check(const CheckResult& r, double tolerance) {
  return {r.measured < tolerance, fmt("%.3g (tolerance %.0e) %s", r.measured, tolerance, r.detail.c_str())};
}

// --- invariants ------------------------------------------------------------------

Outcome bijectivity(const fs::path&) { return from_check(check_round_trip({}), 1e-8); }
Outcome logdet(const fs::path&) { return from_check(check_logdet({}), 1e-4); }
Outcome gradients(const fs::path&) {
  const CheckResult r = check_gradients({});
  Outcome o = from_check(r, 1e-4);
  const auto at = r.detail.find("parameters=");
  const int count = at == std::string::npos ? -1 : std::stoi(r.detail.substr(at + 11));
  o.pass = o.pass && count > 0 && count <= 5000;
  return o;
}
Outcome density(const fs::path&) { return from_check(check_density({}), 0.01); }

// --- learning ------------------------------------------------------------------------

Outcome learning(const fs::path& out) {
  RunConfig c = small_config();
  c.train.steps = 500;
  c.train.val_every = 50;
  c.optim.lr = 2e-4;
  const Dataset data = prepare_dataset(c);
  Trainer trainer(c, data);
  std::ofstream log(out / "learning_log.csv");
  std::vector<double> val;
  trainer.run(&log, nullptr, [&](const LogRow& row) {
    if (row.val_bpd) val.push_back(*row.val_bpd);
  });
  const double initial = val.front(), final = val.back();
  const double reduction = (initial - final) / std::abs(initial);
  return {std::isfinite(reduction) && reduction >= 0.20,
          fmt("val bpd %.4f -> %.4f, reduction %.1f%% of |initial| (need >= 20%%), log %s", initial, final,
              100.0 * reduction, (out / "learning_log.csv").c_str())};
}

Outcome forecast_skill(const fs::path& out) {
  RunConfig c = small_config();
  c.model.scale_adapt = ScaleAdapt::conv;
  c.optim.lr = 1e-3;
  c.train.steps = 2000;
  c.train.val_every = 500;
  const Dataset data = prepare_dataset(c);
  Trainer trainer(c, data);
  std::ofstream log(out / "skill_log.csv");
  trainer.run(&log, nullptr);
  const Model model = trainer.ema_model();
  const Evaluation flow = evaluate(data, flow_predictor(model, 1.0), 10, 4, 8, 1);
  const Evaluation base = evaluate(data, persistence_predictor(), 10, 1, 8, 1);
  std::ofstream csv(out / "skill_metrics.csv");
  write_metrics_csv(csv, flow.report);
  const auto& r = flow.report.rmse;
  bool monotone = flow.steps == 10 && !flow.truncated;
  for (std::size_t s = 1; s < r.size(); ++s) monotone = monotone && r[s] >= r[s - 1];
  const bool skill = r[0] < base.report.rmse[0];
  std::string curve;
  for (double v : r) curve += fmt("%s%.4f", curve.empty() ? "" : ",", v);
  return {skill && monotone, fmt("lead-1 rmse flow %.4f vs persistence %.4f; curve [%s] %s over %d windows", r[0],
                                 base.report.rmse[0], curve.c_str(), monotone ? "non-decreasing" : "NOT monotone",
                                 flow.windows)};
}

// --- rollouts --------------------------------------------------------------------------

Outcome stochasticity(const fs::path& out) {
  RunConfig c = small_config();
  c.data.kind = "stochastic";
  c.train.steps = 100;
  c.train.val_every = 100;
  c.optim.lr = 1e-3;
  const Dataset data = prepare_dataset(c);
  Trainer trainer(c, data);
  trainer.run(nullptr, nullptr);
  const Model model = trainer.ema_model();
  const SampleTuple s = data.window(data.starts[data.splits.test.front()]);

  const int m = 4, lead = 5;
  const std::size_t per = shape_size(data.frames.frame_shape());
  auto spread = [&](double temperature) {
    Rng rng(mix_seed(c.run.seed, 7));
    const Tensor r = model.rollout(s.context, lead, m, temperature, rng);
    std::vector<double> sd(per);
    for (std::size_t i = 0; i < per; ++i) {
      double mean = 0.0, acc = 0.0;
      for (int k = 0; k < m; ++k) mean += r.at((static_cast<std::size_t>(k) * lead + lead - 1) * per + i);
      mean /= m;
      for (int k = 0; k < m; ++k) {
        const double d = r.at((static_cast<std::size_t>(k) * lead + lead - 1) * per + i) - mean;
        acc += d * d;
      }
      sd[i] = std::sqrt(acc / m);
    }
    return sd;
  };
  const auto warm = spread(1.0);
  const auto cold = spread(0.0);
  const double positive =
      static_cast<double>(std::count_if(warm.begin(), warm.end(), [](double v) { return v > 0.0; })) / per;
  const double cold_max = *std::max_element(cold.begin(), cold.end());
  save_pgm(out / "stochastic_std_lead5.pgm", Tensor(data.frames.frame_shape(), warm), 0.0,
           *std::max_element(warm.begin(), warm.end()) + 1e-12);
  return {positive >= 0.5 && cold_max == 0.0,
          fmt("temperature 1: std > 0 on %.1f%% of pixels at lead %d (need >= 50%%); temperature 0: max std %g", 100.0 * positive,
              lead, cold_max)};
}

Outcome extrapolation(const fs::path& out) {
  RunConfig c = small_config();
  c.train.context = 2;
  c.train.steps = 200;
  c.train.val_every = 200;
  c.optim.lr = 1e-3;
  const Dataset data = prepare_dataset(c);
  Trainer trainer(c, data);
  trainer.run(nullptr, nullptr);
  const Model model = trainer.ema_model();
  const int steps = 15;
  const Evaluation e = evaluate(data, flow_predictor(model, 1.0), steps, 4, 8, 2);
  std::ofstream csv(out / "extrapolation_metrics.csv");
  write_metrics_csv(csv, e.report);
  int finite = 0;
  for (int s = 0; s < e.steps; ++s) {
    finite += std::isfinite(e.report.rmse[s]) && std::isfinite(e.report.ssim[s]) && std::isfinite(e.report.psnr[s]) &&
              std::isfinite(e.report.ens_std_mean[s]);
  }
  return {e.steps == steps && !e.truncated && finite == steps && e.windows > 0,
          fmt("context %d, %d/%d leads finite over %d windows, lead-15 rmse %.4f", data.context, finite, steps,
              e.windows, e.steps > 0 ? e.report.rmse[e.steps - 1] : std::nan(""))};
}

// --- reproducibility ---------------------------------------------------------------------

Outcome determinism(const fs::path& out) {
  RunConfig c = small_config();
  c.train.steps = 12;
  c.train.val_every = 4;
  c.train.val_windows = 3;
  c.train.checkpoint_every = 6;
  c.run.seed = 11;
  const Dataset data = prepare_dataset(c);

  auto train_into = [&](const fs::path& dir, const Checkpoint* resume) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    Trainer t = resume ? Trainer(*resume, data) : Trainer(c, data);
    std::ofstream log(dir / "log.csv");
    const fs::path ck = dir / "checkpoints";
    t.run(&log, &ck);
  };
  train_into(out / "det_a", nullptr);
  train_into(out / "det_b", nullptr);
  const Checkpoint mid = load_checkpoint(out / "det_a/checkpoints/step_00000006.ckpt");
  train_into(out / "det_resume", &mid);

  int identical = 0, compared = 0;
  for (const char* f : {"log.csv", "checkpoints/step_00000006.ckpt", "checkpoints/step_00000012.ckpt",
                        "checkpoints/final.ckpt"}) {
    ++compared;
    identical += read_file(out / "det_a" / f) == read_file(out / "det_b" / f) && !read_file(out / "det_a" / f).empty();
  }
  const bool final_same = read_file(out / "det_a/checkpoints/final.ckpt") ==
                          read_file(out / "det_resume/checkpoints/final.ckpt");
  std::istringstream full(read_file(out / "det_a/log.csv"));
  std::vector<std::string> lines;
  for (std::string l; std::getline(full, l);) lines.push_back(l);
  std::string expected_tail;
  for (std::size_t i = 8; i < lines.size(); ++i) expected_tail += lines[i] + "\n";
  const bool tail_same = read_file(out / "det_resume/log.csv") == expected_tail;
  return {identical == compared && final_same && tail_same,
          fmt("%d/%d artifacts bit-identical across runs; resume from step 6: final checkpoint %s, log tail %s",
              identical, compared, final_same ? "identical" : "DIFFERS", tail_same ? "identical" : "DIFFERS")};
}

Outcome metric_values(const fs::path&) {
  double worst = 0.0;
  bool exact = true;
  auto near = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };

  const Tensor zero({2}, std::vector<double>{0.0, 0.0});
  const Tensor t34({2}, std::vector<double>{3.0, 4.0});
  near(rmse(zero, t34), std::sqrt(12.5));
  Tensor x({1, 9, 11}), y({1, 9, 11});
  for (int i = 0; i < 9; ++i) {
    for (int j = 0; j < 11; ++j) {
      const double v = std::sin(0.3 * i + 0.7 * j);
      x.mutable_data()[i * 11 + j] = v;
      y.mutable_data()[i * 11 + j] = v * v + 0.1 * std::cos(i * j);
    }
  }
  exact = exact && rmse(x, x) == 0.0;
  near(rmse(add_scalar(x, 2.0), x), 2.0);

  const Tensor p1({1}, std::vector<double>{0.1}), p0({1}, std::vector<double>{0.0});
  near(psnr(p1, p0, 1.0), 20.0);
  exact = exact && psnr(x, x, 1.0) == std::numeric_limits<double>::infinity();
  const Tensor half({1}, std::vector<double>{0.1 / std::sqrt(2.0)});
  near(psnr(half, p0, 1.0) - psnr(p1, p0, 1.0), 10.0 * std::log10(2.0));

  exact = exact && ssim(x, x, 2.0) == 1.0;
  exact = exact && ssim(add_scalar(neg(x), 1.0), x, 2.0) < 1.0;
  const Tensor flat({1, 7, 7}, 0.3);
  exact = exact && ssim(flat, flat, 1.0) == 1.0;
  exact = exact && ssim(x, y, 2.0) == ssim(y, x, 2.0);
  near(ssim(x, y, 2.0), 0.079480592643010592);  // scikit-image structural_similarity

  GridMeta meta;
  const std::vector<Tensor> targets{Tensor({1, 8, 8}, 0.25), Tensor({1, 8, 8}, 0.5)};
  Tensor perfect({2, 2, 1, 8, 8});
  for (std::size_t i = 0; i < perfect.size(); ++i) perfect.mutable_data()[i] = (i / 64) % 2 ? 0.5 : 0.25;
  const RolloutReport r = rollout_report(perfect, targets, meta, 2);
  exact = exact && r.rmse[0] == 0.0 && r.ssim[0] == 1.0 && r.ens_std_mean[0] == 0.0 && r.steps() == 2;
  const Tensor still({1, 8, 8}, 0.4);
  const std::vector<Tensor> ctx{still, still};
  const Tensor pers = persistence_baseline(ctx, 3);
  exact = exact && pers.shape() == Shape({3, 1, 8, 8}) && rmse(reshape(slice(pers, 2, 3), {1, 8, 8}), still) == 0.0;

  return {exact && worst <= 1e-9, fmt("identities %s, worst deviation from hand/oracle values %.2e (tolerance 1e-9)",
                                      exact ? "exact" : "VIOLATED", worst)};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out = "acceptance_out";
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--out" && i + 1 < argc) {
      out = argv[++i];
    } else {
      try {
        selected.insert(std::stoi(a));
      } catch (const std::exception&) {
        std::fprintf(stderr, "usage: acceptance [--out DIR] [ID ...]\n");
        return 2;
      }
    }
  }
  fs::create_directories(out);

  const std::vector<Criterion> criteria{
      {1, "bijectivity", 10, bijectivity},
      {2, "logdet_exactness", 30, logdet},
      {3, "gradient_integrity", 120, gradients},
      {4, "density_normalization", 60, density},
      {5, "learning", 600, learning},
      {6, "forecast_skill", 1800, forecast_skill},
      {7, "stochasticity", 300, stochasticity},
      {8, "extrapolation", 300, extrapolation},
      {9, "determinism", 0, determinism},
      {10, "metric_values", 0, metric_values},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.contains(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(out);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.time_limit <= 0 || secs < c.time_limit;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::string limit = c.time_limit > 0 ? fmt(" (limit %.0fs)", c.time_limit) : "";
    std::printf("AC%-2d %-22s %s  %s  time=%.1fs%s\n", c.id, c.name, pass ? "PASS" : "FAIL", o.measured.c_str(), secs,
                limit.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
