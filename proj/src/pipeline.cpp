#include "stflow/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>

#include "stflow/errors.hpp"

namespace stflow {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string checkpoint_name(std::uint64_t step) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "step_%08llu.ckpt", static_cast<unsigned long long>(step));
  return buf;
}

Tensor frame_range(const GridSequence& seq, int begin, int count) {
  std::vector<Tensor> frames;
  for (int t = begin; t < begin + count; ++t) frames.push_back(seq.frame(t));
  Shape shape{1, count};
  const Shape f = seq.frame_shape();
  shape.insert(shape.end(), f.begin(), f.end());
  return reshape(concat(frames), shape);
}

}  // namespace

GridSequence generate_dataset(const DataConfig& data, const ModelConfig& model) {
  if (model.in_channels != 1) throw ConfigError("synthetic generators produce one channel; set model.in_channels=1");
  if (data.kind == "advection") {
    AdvectionParams p;
    p.height = model.height;
    p.width = model.width;
    p.length = data.length;
    p.sequences = data.sequences;
    p.vx = data.vx;
    p.vy = data.vy;
    p.blobs = data.blobs;
    p.seed = data.seed;
    return synth_advection(p);
  }
  if (data.kind == "stochastic") {
    StochasticParams p;
    p.height = model.height;
    p.width = model.width;
    p.length = data.length;
    p.sequences = data.sequences;
    p.noise_scale = data.noise_scale;
    p.diffusion = data.diffusion;
    p.seed = data.seed;
    return synth_stochastic(p);
  }
  throw ConfigError("unknown data.kind '" + data.kind + "'");
}

int Dataset::frames_after(int start) const {
  const int total = frames.length();
  const int segment = frames.meta.segment_length > 0 ? frames.meta.segment_length : total;
  return (start / segment + 1) * segment - start;
}

Dataset prepare_dataset(const RunConfig& config) {
  GridSequence raw = config.data.path.empty() ? generate_dataset(config.data, config.model)
                                              : load_grid(config.data.path);
  if (raw.frame_shape() != config.model.frame_shape()) {
    throw ConfigError("dataset frames are " + shape_string(raw.frame_shape()) + " but the model expects " +
                      shape_string(config.model.frame_shape()));
  }
  Dataset d;
  d.context = config.train.context;
  d.starts = window_starts(raw, d.context);
  d.splits = split_temporal(static_cast<int>(d.starts.size()),
                            {config.data.train_fraction, config.data.val_fraction, config.data.test_fraction},
                            config.data.seed);
  std::vector<int> train_starts;
  for (int i : d.splits.train) train_starts.push_back(d.starts[i]);
  const auto [lo, hi] = normalize_fit(raw, frames_of_windows(train_starts, d.context));
  raw.meta.min_z = lo;
  raw.meta.max_z = hi;
  d.frames.meta = raw.meta;
  d.frames.frames = normalize(raw.frames, raw.meta, &d.out_of_range);
  return d;
}

std::string log_header() { return "step,lr,train_nll,train_bpd,val_bpd"; }

std::string format_log_row(const LogRow& row) {
  std::string s = std::to_string(row.step) + "," + fmt(row.lr) + ",";
  if (row.train_nll) s += fmt(*row.train_nll);
  s += ",";
  if (row.train_bpd) s += fmt(*row.train_bpd);
  s += ",";
  if (row.val_bpd) s += fmt(*row.val_bpd);
  return s;
}

Trainer::Trainer(RunConfig config, const Dataset& data) : config_(std::move(config)), data_(&data) {
  config_.validate();
  if (data.splits.train.empty()) throw ShapeError("training split is empty");
  seed_ = config_.run.seed;
  model_ = Model::build(config_.model, seed_);
  initialize();
}

Trainer::Trainer(const Checkpoint& ck, const Dataset& data) : config_(ck.config), data_(&data), seed_(ck.seed) {
  config_.validate();
  if (data.splits.train.empty()) throw ShapeError("training split is empty");
  model_ = ck.restore_model(false);
  optim_.step = ck.optim.step;
  for (const auto& t : ck.optim.m) optim_.m.push_back(t.defined() ? t.detach() : Tensor());
  for (const auto& t : ck.optim.v) optim_.v.push_back(t.defined() ? t.detach() : Tensor());
  for (const auto& t : ck.optim.shadow) optim_.shadow.push_back(t.detach());
  if (optim_.step == 0) initialize();
}

void Trainer::initialize() {
  if (!model_.initialized()) {
    Rng rng(mix_seed(seed_, 0));
    std::vector<Tensor> xs;
    std::vector<MemoryState> memories;
    for (int start : draw_batch(rng)) {
      const SampleTuple s = data_->window(start);
      xs.push_back(s.target);
      memories.push_back(model_.encode_context(s.context));
    }
    model_.data_init(xs, memories);
  }
  optim_ = AdamState::init(model_.parameters());
}

std::uint64_t Trainer::total_steps() const {
  if (config_.train.steps > 0) return config_.train.steps;
  const auto n = static_cast<std::uint64_t>(data_->splits.train.size());
  const auto b = static_cast<std::uint64_t>(config_.train.batch);
  return static_cast<std::uint64_t>(config_.train.epochs) * ((n + b - 1) / b);
}

std::vector<int> Trainer::draw_batch(Rng& rng) const {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(data_->splits.train.size()) - 1);
  std::vector<int> out;
  for (int i = 0; i < config_.train.batch; ++i) out.push_back(data_->train_start(pick(rng)));
  return out;
}

LogRow Trainer::step_once() {
  Rng rng(mix_seed(seed_, optim_.step));
  const std::vector<int> batch = draw_batch(rng);
  const ParamList params = model_.parameters();
  const double jitter = config_.model.jitter;

  Graph graph;
  Tensor loss;
  {
    GraphScope scope(graph);
    Tensor total;
    for (int start : batch) {
      const SampleTuple s = data_->window(start);
      Tensor x = s.target;
      if (jitter > 0.0) x = x + randn(x.shape(), rng, jitter);
      const MemoryState memory = model_.encode_context(s.context);
      const Tensor nll = model_.forward_nll(x, memory).nll;
      total = total.defined() ? total + nll : nll;
    }
    loss = mul_scalar(total, 1.0 / static_cast<double>(batch.size()));
  }
  const Gradients grads = graph.backward(loss);
  const StepReport report = adam_step(params, grads, optim_, config_.optim);

  LogRow row;
  row.step = optim_.step;
  row.lr = report.lr;
  row.train_nll = loss.item();
  row.train_bpd = bits_per_dim(loss.item(), config_.model.frame_dims());
  return row;
}

std::vector<int> Trainer::validation_starts() const {
  std::vector<int> out;
  for (int i : data_->splits.val) out.push_back(data_->starts[i]);
  const int cap = config_.train.val_windows;
  if (cap > 0 && static_cast<int>(out.size()) > cap) out.resize(cap);
  return out;
}

Model Trainer::ema_model() const {
  Model m = model_.clone();
  m.assign(optim_.shadow);
  return m;
}

double Trainer::validate(bool use_ema) const {
  const std::vector<int> starts = validation_starts();
  if (starts.empty()) throw ShapeError("validation split is empty");
  const Model ema = use_ema ? ema_model() : Model();
  const Model& m = use_ema ? ema : model_;
  double total = 0.0;
  for (int start : starts) {
    const SampleTuple s = data_->window(start);
    total += m.forward_nll(s.target, m.encode_context(s.context)).nll.item();
  }
  return bits_per_dim(total / static_cast<double>(starts.size()), config_.model.frame_dims());
}

Checkpoint Trainer::checkpoint() const { return Checkpoint::capture(config_, model_, optim_, seed_); }

void Trainer::run(std::ostream* log, const std::filesystem::path* checkpoint_dir,
                  const std::function<void(const LogRow&)>& on_row) {
  const bool has_val = !data_->splits.val.empty();
  auto emit = [&](const LogRow& row) {
    if (log != nullptr) {
      *log << format_log_row(row) << '\n';
      log->flush();
    }
    if (on_row) on_row(row);
  };
  if (checkpoint_dir != nullptr) std::filesystem::create_directories(*checkpoint_dir);
  if (step() == 0) {
    if (log != nullptr) *log << log_header() << '\n';
    LogRow first;
    first.lr = lr_at(config_.optim, 0);
    if (has_val) first.val_bpd = validate();
    emit(first);
  }
  const std::uint64_t total = total_steps();
  while (step() < total) {
    LogRow row = step_once();
    const bool last = row.step == total;
    if (has_val && (row.step % static_cast<std::uint64_t>(config_.train.val_every) == 0 || last)) {
      row.val_bpd = validate();
    }
    if (row.step % static_cast<std::uint64_t>(config_.train.log_every) == 0 || row.val_bpd || last) emit(row);
    if (checkpoint_dir != nullptr) {
      const auto every = static_cast<std::uint64_t>(config_.train.checkpoint_every);
      if (every > 0 && row.step % every == 0) save_checkpoint(*checkpoint_dir / checkpoint_name(row.step), checkpoint());
      if (last) save_checkpoint(*checkpoint_dir / "final.ckpt", checkpoint());
    }
  }
}

Predictor flow_predictor(const Model& model, double temperature) {
  return [&model, temperature](std::span<const Tensor> context, int, int steps, int trajectories, Rng& rng) {
    return model.rollout(context, steps, trajectories, temperature, rng);
  };
}

Predictor oracle_predictor(const Dataset& data) {
  return [&data](std::span<const Tensor> context, int start, int steps, int trajectories, Rng&) {
    const Tensor truth = frame_range(data.frames, start + static_cast<int>(context.size()), steps);
    std::vector<Tensor> copies(static_cast<std::size_t>(trajectories), truth);
    Shape shape = truth.shape();
    shape[0] = trajectories;
    return reshape(concat(copies), shape);
  };
}

Predictor persistence_predictor() {
  return [](std::span<const Tensor> context, int, int steps, int, Rng&) {
    const Tensor p = persistence_baseline(context, steps);
    Shape shape{1};
    shape.insert(shape.end(), p.shape().begin(), p.shape().end());
    return reshape(p, shape);
  };
}

Evaluation evaluate(const Dataset& data, const Predictor& predict, int steps, int trajectories, int max_windows,
                    std::uint64_t seed) {
  if (steps < 1 || trajectories < 1) throw ConfigError("evaluation needs steps >= 1 and trajectories >= 1");
  std::vector<int> candidates;
  for (int i : data.splits.test) candidates.push_back(data.starts[i]);
  if (candidates.empty()) throw ShapeError("test split is empty");

  Evaluation ev;
  ev.steps = steps;
  std::vector<int> chosen;
  int best = 0;
  for (int start : candidates) {
    const int available = data.frames_after(start) - data.context;
    best = std::max(best, available);
    if (available >= steps) chosen.push_back(start);
  }
  if (chosen.empty()) {
    ev.truncated = true;
    ev.steps = best;
    for (int start : candidates) {
      if (data.frames_after(start) - data.context >= best) chosen.push_back(start);
    }
  }
  if (max_windows > 0 && static_cast<int>(chosen.size()) > max_windows) chosen.resize(max_windows);

  RolloutReport& acc = ev.report;
  acc.context_length = data.context;
  for (std::size_t k = 0; k < chosen.size(); ++k) {
    const int start = chosen[k];
    std::vector<Tensor> context;
    for (int t = start; t < start + data.context; ++t) context.push_back(data.frames.frame(t));
    std::vector<Tensor> targets;
    for (int t = 0; t < ev.steps; ++t) targets.push_back(data.frames.frame(start + data.context + t));
    Rng rng(mix_seed(seed, k));
    const Tensor pred = predict(context, start, ev.steps, trajectories, rng);
    const RolloutReport r = rollout_report(pred, targets, data.frames.meta, data.context);
    if (k == 0) {
      acc.rmse = r.rmse;
      acc.ssim = r.ssim;
      acc.psnr = r.psnr;
      acc.ens_std_mean = r.ens_std_mean;
      acc.std_field = r.std_field;
    } else {
      for (int s = 0; s < ev.steps; ++s) {
        acc.rmse[s] += r.rmse[s];
        acc.ssim[s] += r.ssim[s];
        acc.psnr[s] += r.psnr[s];
        acc.ens_std_mean[s] += r.ens_std_mean[s];
        acc.std_field[s] = acc.std_field[s] + r.std_field[s];
      }
    }
  }
  const double n = static_cast<double>(chosen.size());
  for (int s = 0; s < ev.steps; ++s) {
    acc.rmse[s] /= n;
    acc.ssim[s] /= n;
    acc.psnr[s] /= n;
    acc.ens_std_mean[s] /= n;
    acc.std_field[s] = mul_scalar(acc.std_field[s], 1.0 / n);
  }
  ev.windows = static_cast<int>(chosen.size());
  return ev;
}

std::string evaluation_summary(const Evaluation& flow, const Evaluation& baseline, std::span<const int> leads) {
  std::ostringstream out;
  out << "windows=" << flow.windows << " context=" << flow.report.context_length
      << " (leads beyond the context length are extrapolation)\n";
  out << "lead  flow_rmse     persist_rmse  flow_ssim  persist_ssim  flow_psnr  persist_psnr\n";
  for (int lead : leads) {
    if (lead > flow.steps || lead > baseline.steps) continue;
    const int s = lead - 1;
    char line[256];
    std::snprintf(line, sizeof line, "%-5d %-13s %-13s %-10s %-13s %-10s %s\n", lead,
                  fixed(flow.report.rmse[s], 6).c_str(), fixed(baseline.report.rmse[s], 6).c_str(),
                  fixed(flow.report.ssim[s], 4).c_str(), fixed(baseline.report.ssim[s], 4).c_str(),
                  fixed(flow.report.psnr[s], 2).c_str(), fixed(baseline.report.psnr[s], 2).c_str());
    out << line;
  }
  return out.str();
}

}  // namespace stflow
