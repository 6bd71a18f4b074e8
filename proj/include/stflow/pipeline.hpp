#pragma once

// Dataset preparation, the training loop and rollout evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stflow/checkpoint.hpp"
#include "stflow/config.hpp"
#include "stflow/data.hpp"
#include "stflow/metrics.hpp"
#include "stflow/model.hpp"
#include "stflow/optim.hpp"

namespace stflow {

/// Raw (physical-unit) sequence described by the data section.
GridSequence generate_dataset(const DataConfig& data, const ModelConfig& model);

struct Dataset {
  GridSequence frames;       // normalized; meta carries min_z / max_z
  std::vector<int> starts;   // window starts for the training context length
  Splits splits;             // indices into `starts`
  int context = 2;
  std::size_t out_of_range = 0;  // normalized values outside [0, 1]

  SampleTuple window(int start) const { return window_at(frames, start, context); }
  int train_start(int i) const { return starts[splits.train[i]]; }
  /// Frames available after `start` inside its segment.
  int frames_after(int start) const;
};

/// Loads data.path (or generates), splits window starts, fits min/max on the
/// training windows and normalizes every frame.
Dataset prepare_dataset(const RunConfig& config);

struct LogRow {
  std::uint64_t step = 0;
  double lr = 0.0;
  std::optional<double> train_nll;  // nats per frame
  std::optional<double> train_bpd;
  std::optional<double> val_bpd;
};

std::string log_header();
std::string format_log_row(const LogRow& row);

/// Keeps a pointer to the dataset, which must outlive the trainer.
class Trainer {
 public:
  Trainer(RunConfig config, const Dataset& data);
  /// Continues from a checkpoint; the dataset must come from the same config.
  Trainer(const Checkpoint& ck, const Dataset& data);

  std::uint64_t step() const { return optim_.step; }
  std::uint64_t total_steps() const;

  /// One optimizer update on a batch drawn from the step's own RNG stream.
  LogRow step_once();
  /// Mean validation bits per dim with EMA (or raw) parameters.
  double validate(bool use_ema = true) const;

  /// Runs to total_steps, writing log rows (and the header on a fresh start)
  /// and periodic checkpoints into `checkpoint_dir` when given.
  void run(std::ostream* log, const std::filesystem::path* checkpoint_dir,
           const std::function<void(const LogRow&)>& on_row = {});

  Checkpoint checkpoint() const;
  const Model& model() const { return model_; }
  Model ema_model() const;
  const RunConfig& config() const { return config_; }

 private:
  void initialize();
  std::vector<int> draw_batch(Rng& rng) const;
  std::vector<int> validation_starts() const;

  RunConfig config_;
  const Dataset* data_;
  Model model_;
  AdamState optim_;
  std::uint64_t seed_ = 0;
};

/// Predicts [m, n, C, H, W] normalized frames from a normalized context.
using Predictor = std::function<Tensor(std::span<const Tensor> context, int start, int steps, int trajectories,
                                       Rng& rng)>;

Predictor flow_predictor(const Model& model, double temperature);
/// Copies the ground truth for every trajectory.
Predictor oracle_predictor(const Dataset& data);
Predictor persistence_predictor();

struct Evaluation {
  RolloutReport report;  // per-lead means over the evaluated windows
  int windows = 0;
  int steps = 0;
  bool truncated = false;  // fewer ground-truth frames than requested steps
};

/// Rolls out from test-split windows and averages per-lead metrics.
Evaluation evaluate(const Dataset& data, const Predictor& predict, int steps, int trajectories, int max_windows,
                    std::uint64_t seed);

/// Table-style text summary of flow and baseline at the requested leads.
std::string evaluation_summary(const Evaluation& flow, const Evaluation& baseline, std::span<const int> leads);

}  // namespace stflow
