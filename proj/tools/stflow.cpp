// stflow: dataset generation, training, evaluation, rollout, sampling and
// verification from the command line.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "stflow/errors.hpp"
#include "stflow/image.hpp"
#include "stflow/pipeline.hpp"
#include "stflow/verify.hpp"

using namespace stflow;
namespace fs = std::filesystem;

namespace {

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

struct Override {
  std::string key;
  std::string value;
};

bool is_section(const std::string& s) {
  return s == "model" || s == "optim" || s == "train" || s == "data" || s == "eval" || s == "run";
}

/// Pulls `--section.key=value` and `--section.key value` out of argv.
std::vector<Override> take_overrides(std::vector<std::string>& args) {
  std::vector<Override> out;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    const auto dot = a.find('.');
    if (a.rfind("--", 0) == 0 && dot != std::string::npos && is_section(a.substr(2, dot - 2))) {
      const auto eq = a.find('=');
      if (eq != std::string::npos) {
        out.push_back({a.substr(2, eq - 2), a.substr(eq + 1)});
      } else if (i + 1 < args.size()) {
        out.push_back({a.substr(2), args[++i]});
      } else {
        throw ConfigError("missing value for " + a);
      }
    } else {
      rest.push_back(a);
    }
  }
  args = std::move(rest);
  return out;
}

struct ConfigSource {
  std::string preset = "desk";
  std::string file;
};

RunConfig resolve(const ConfigSource& src, const std::vector<Override>& overrides) {
  RunConfig c = preset(src.preset);
  if (!src.file.empty()) {
    std::ifstream in(src.file);
    if (!in) throw ConfigError("cannot open config " + src.file);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    apply_config_text(c, text);
  }
  for (const auto& o : overrides) c.set(o.key, o.value);
  apply_environment(c);
  c.validate();
  return c;
}

/// Checkpoint config with command-line overrides applied on top.
RunConfig checkpoint_config(const Checkpoint& ck, const std::vector<Override>& overrides) {
  RunConfig c = ck.config;
  for (const auto& o : overrides) {
    if (o.key.rfind("model.", 0) == 0 && o.key != "model.temperature") {
      throw ConfigError(o.key + " is fixed by the checkpoint");
    }
    c.set(o.key, o.value);
  }
  c.validate();
  return c;
}

void add_config_options(CLI::App* cmd, ConfigSource& src) {
  cmd->add_option("--config", src.file, "Config file of key=value lines")->check(CLI::ExistingFile);
  cmd->add_option("--preset", src.preset, "Base profile")->check(CLI::IsMember({"desk", "full"}));
}

std::string step_name(int step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%03d.pgm", step);
  return buf;
}

void write_csv(const fs::path& path, const RolloutReport& report) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_metrics_csv(out, report);
}

int cmd_make_data(const RunConfig& c, const std::string& out_path) {
  const GridSequence seq = generate_dataset(c.data, c.model);
  if (const auto parent = fs::path(out_path).parent_path(); !parent.empty()) fs::create_directories(parent);
  save_grid(out_path, seq);
  double lo = seq.frames.at(0), hi = lo;
  for (double v : seq.frames.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::printf("wrote %s kind=%s T=%d C=%d H=%d W=%d min=%.6g max=%.6g bytes=%ju\n", out_path.c_str(),
              c.data.kind.c_str(), seq.frames.dim(0), seq.frames.dim(1), seq.frames.dim(2), seq.frames.dim(3), lo,
              hi, static_cast<std::uintmax_t>(fs::file_size(out_path)));
  return 0;
}

int cmd_train(const ConfigSource& src, const std::vector<Override>& overrides, const std::string& resume) {
  std::optional<Checkpoint> ck;
  RunConfig c;
  if (!resume.empty()) {
    ck = load_checkpoint(resume);
    c = checkpoint_config(*ck, overrides);
    ck->config = c;
  } else {
    c = resolve(src, overrides);
  }
  const fs::path out = c.run.out_dir;
  fs::create_directories(out);
  save_config(out / "config.txt", c);

  const Dataset data = prepare_dataset(c);
  if (data.out_of_range > 0) {
    std::fprintf(stderr, "warning: %zu normalized values fall outside [0, 1] (passed through unclipped)\n",
                 data.out_of_range);
  }
  Trainer trainer = ck ? Trainer(*ck, data) : Trainer(c, data);
  std::printf("training %llu steps from step %llu: train=%zu val=%zu test=%zu windows, %zu parameters\n",
              static_cast<unsigned long long>(trainer.total_steps()),
              static_cast<unsigned long long>(trainer.step()), data.splits.train.size(), data.splits.val.size(),
              data.splits.test.size(), parameter_count(trainer.model().parameters()));
  std::ofstream log(out / "train_log.csv", ck ? std::ios::app : std::ios::trunc);
  if (!log) throw Error("cannot write " + (out / "train_log.csv").string());
  const fs::path ckdir = out / "checkpoints";
  trainer.run(&log, &ckdir, [](const LogRow& row) {
    if (row.val_bpd) {
      std::printf("step %llu lr %.3g train_bpd %s val_bpd %.6f\n", static_cast<unsigned long long>(row.step), row.lr,
                  row.train_bpd ? std::to_string(*row.train_bpd).c_str() : "-", *row.val_bpd);
      std::fflush(stdout);
    }
  });
  std::printf("final checkpoint %s\n", (ckdir / "final.ckpt").c_str());
  return 0;
}

int cmd_evaluate(const std::vector<Override>& overrides, const std::string& ckpt, int trajectories,
                 const std::string& out_dir, bool oracle) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const RunConfig c = checkpoint_config(ck, overrides);
  const int m = trajectories > 0 ? trajectories : c.eval.trajectories;
  const Dataset data = prepare_dataset(c);
  const Model model = ck.restore_model(c.eval.use_ema);
  const Predictor predict = oracle ? oracle_predictor(data) : flow_predictor(model, c.model.temperature);
  const Evaluation flow = evaluate(data, predict, c.eval.steps, m, c.eval.windows, c.run.seed);
  const Evaluation base = evaluate(data, persistence_predictor(), c.eval.steps, 1, c.eval.windows, c.run.seed);
  if (flow.truncated) {
    std::fprintf(stderr, "warning: only %d lead times have ground truth; metrics truncated\n", flow.steps);
  }
  const fs::path out = out_dir.empty() ? fs::path(c.run.out_dir) / "eval" : fs::path(out_dir);
  fs::create_directories(out);
  write_csv(out / "metrics.csv", flow.report);
  write_csv(out / "persistence.csv", base.report);
  const std::vector<int> leads = c.lead_list();
  std::printf("%s", evaluation_summary(flow, base, leads).c_str());
  std::printf("metrics written to %s\n", out.c_str());
  return 0;
}

int cmd_rollout(const std::vector<Override>& overrides, const std::string& ckpt, int steps, int trajectories,
                double temperature, int window, int start, const std::string& out_dir) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const RunConfig c = checkpoint_config(ck, overrides);
  const Dataset data = prepare_dataset(c);
  const Model model = ck.restore_model(c.eval.use_ema);
  if (start < 0) {
    if (data.splits.test.empty()) throw ShapeError("test split is empty; pass --start");
    if (window < 0 || window >= static_cast<int>(data.splits.test.size())) {
      throw ConfigError("--window must lie in [0, " + std::to_string(data.splits.test.size()) + ")");
    }
    start = data.starts[data.splits.test[window]];
  }
  if (start + data.context > data.frames.length()) throw ConfigError("--start leaves no room for the context");
  std::vector<Tensor> context;
  for (int t = start; t < start + data.context; ++t) context.push_back(data.frames.frame(t));

  Rng rng(mix_seed(c.run.seed, static_cast<std::uint64_t>(start)));
  const Tensor pred = model.rollout(context, steps, trajectories, temperature, rng);
  const GridMeta& meta = data.frames.meta;
  const Tensor physical = denormalize(pred, meta);
  const Shape frame = data.frames.frame_shape();
  const std::size_t per = shape_size(frame);

  const fs::path out = out_dir.empty() ? fs::path(c.run.out_dir) / "rollout" : fs::path(out_dir);
  for (int k = 0; k < trajectories; ++k) {
    const fs::path dir = out / ("trajectory_" + std::to_string(k));
    fs::create_directories(dir);
    for (int s = 0; s < steps; ++s) {
      const auto offset = (static_cast<std::size_t>(k) * steps + s) * per;
      std::vector<double> v(physical.data().begin() + offset, physical.data().begin() + offset + per);
      save_pgm(dir / step_name(s + 1), Tensor(frame, std::move(v)), meta.min_z, meta.max_z);
    }
  }

  const int available = std::min(steps, data.frames_after(start) - data.context);
  if (available < steps) {
    std::fprintf(stderr, "warning: ground truth covers %d of %d steps; metrics truncated\n", available, steps);
  }
  const fs::path std_dir = out / "std";
  fs::create_directories(std_dir);
  if (available > 0) {
    std::vector<Tensor> targets;
    for (int s = 0; s < available; ++s) targets.push_back(data.frames.frame(start + data.context + s));
    std::vector<double> head;
    for (int k = 0; k < trajectories; ++k) {
      const auto base = static_cast<std::size_t>(k) * steps * per;
      head.insert(head.end(), pred.data().begin() + base, pred.data().begin() + base + available * per);
    }
    Shape shape{trajectories, available};
    shape.insert(shape.end(), frame.begin(), frame.end());
    const RolloutReport report = rollout_report(Tensor(shape, std::move(head)), targets, meta, data.context);
    write_csv(out / "metrics.csv", report);
  }
  const double range = meta.max_z - meta.min_z;
  for (int s = 0; s < steps; ++s) {
    std::vector<double> sd(per, 0.0);
    for (std::size_t i = 0; i < per; ++i) {
      double mean = 0.0;
      for (int k = 0; k < trajectories; ++k) mean += physical.at((static_cast<std::size_t>(k) * steps + s) * per + i);
      mean /= trajectories;
      double acc = 0.0;
      for (int k = 0; k < trajectories; ++k) {
        const double d = physical.at((static_cast<std::size_t>(k) * steps + s) * per + i) - mean;
        acc += d * d;
      }
      sd[i] = std::sqrt(acc / trajectories);
    }
    save_pgm(std_dir / step_name(s + 1), Tensor(frame, std::move(sd)), 0.0, range);
  }
  std::printf("rollout from frame %d: %d trajectories x %d steps at temperature %g written to %s\n", start,
              trajectories, steps, temperature, out.c_str());
  return 0;
}

int cmd_sample(const std::vector<Override>& overrides, const std::string& ckpt, int count, double temperature,
               int window, const std::string& out_dir) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const RunConfig c = checkpoint_config(ck, overrides);
  const Dataset data = prepare_dataset(c);
  const Model model = ck.restore_model(c.eval.use_ema);
  if (data.splits.test.empty()) throw ShapeError("test split is empty");
  if (window < 0 || window >= static_cast<int>(data.splits.test.size())) {
    throw ConfigError("--window must lie in [0, " + std::to_string(data.splits.test.size()) + ")");
  }
  const SampleTuple s = data.window(data.starts[data.splits.test[window]]);
  const MemoryState memory = model.encode_context(s.context);
  const fs::path out = out_dir.empty() ? fs::path(c.run.out_dir) / "samples" : fs::path(out_dir);
  fs::create_directories(out);
  Rng rng(mix_seed(c.run.seed, static_cast<std::uint64_t>(s.start)));
  const GridMeta& meta = data.frames.meta;
  for (int k = 0; k < count; ++k) {
    const Tensor x = denormalize(model.sample(memory, temperature, rng), meta);
    save_pgm(out / ("sample_" + std::to_string(k) + ".pgm"), x, meta.min_z, meta.max_z);
  }
  save_pgm(out / "target.pgm", denormalize(s.target, meta), meta.min_z, meta.max_z);
  std::printf("%d samples at temperature %g written to %s\n", count, temperature, out.c_str());
  return 0;
}

int cmd_verify(std::uint64_t seed, bool corrupt) {
  VerifyOptions options;
  options.seed = seed;
  options.corrupt_inverse = corrupt;
  bool ok = true;
  for (const auto& r : run_verification(options)) {
    std::printf("%s\n", format_check(r).c_str());
    ok = ok && r.pass;
  }
  std::printf("RESULT %s\n", ok ? "PASS" : "FAIL");
  return ok ? 0 : kRuntimeError;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::vector<Override> overrides;
  try {
    overrides = take_overrides(args);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsageError;
  }

  CLI::App app{"Conditional spatio-temporal normalizing flows"};
  app.require_subcommand(1);
  ConfigSource src;

  std::string out_path;
  std::string kind = "advection";
  auto* make = app.add_subcommand("make-data", "Write a synthetic STGRID dataset");
  add_config_options(make, src);
  make->add_option("--kind", kind, "advection or stochastic")->check(CLI::IsMember({"advection", "stochastic"}));
  make->add_option("--out", out_path, "Output file")->required();

  std::string resume;
  auto* train = app.add_subcommand("train", "Train a model");
  add_config_options(train, src);
  train->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);

  std::string ckpt, out_dir;
  int trajectories = 0;
  bool oracle = false;
  auto* eval = app.add_subcommand("evaluate", "Per-lead metrics against the persistence baseline");
  eval->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--trajectories", trajectories, "Ensemble size (default eval.trajectories)");
  eval->add_option("--out", out_dir, "Output directory");
  eval->add_flag("--oracle", oracle, "Score the ground truth itself (test hook)");

  int steps = 10, window = 0, start = -1;
  double temperature = 1.0;
  auto* roll = app.add_subcommand("rollout", "Autoregressive rollout written as PGM frames");
  roll->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  roll->add_option("--steps", steps)->check(CLI::PositiveNumber);
  roll->add_option("--trajectories", trajectories)->check(CLI::PositiveNumber);
  roll->add_option("--temperature", temperature)->check(CLI::NonNegativeNumber);
  roll->add_option("--window", window, "Test window supplying the context");
  roll->add_option("--start", start, "First context frame (overrides --window)");
  roll->add_option("--out", out_dir);

  int count = 4;
  auto* sample = app.add_subcommand("sample", "Draw next-frame samples for one context");
  sample->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  sample->add_option("--count", count)->check(CLI::PositiveNumber);
  sample->add_option("--temperature", temperature)->check(CLI::NonNegativeNumber);
  sample->add_option("--window", window);
  sample->add_option("--out", out_dir);

  std::uint64_t verify_seed = 0;
  bool corrupt = false;
  auto* verify = app.add_subcommand("verify", "Run the invariant suite");
  verify->add_option("--seed", verify_seed);
  verify->add_flag("--corrupt-inverse", corrupt, "Invert with a perturbed model (negative control)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (*make) {
      RunConfig c = resolve(src, overrides);
      c.data.kind = kind;
      return cmd_make_data(c, out_path);
    }
    if (*train) return cmd_train(src, overrides, resume);
    if (*eval) return cmd_evaluate(overrides, ckpt, trajectories, out_dir, oracle);
    if (*roll) {
      if (trajectories == 0) trajectories = 4;
      return cmd_rollout(overrides, ckpt, steps, trajectories, temperature, start >= 0 ? -1 : window, start, out_dir);
    }
    if (*sample) return cmd_sample(overrides, ckpt, count, temperature, window, out_dir);
    if (*verify) return cmd_verify(verify_seed, corrupt);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsageError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeError;
  }
  return kUsageError;
}
