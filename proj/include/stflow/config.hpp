#pragma once

// Run configuration as flat `section.key=value` text.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stflow/model.hpp"
#include "stflow/optim.hpp"

namespace stflow {

struct TrainConfig {
  std::uint64_t steps = 0;  // 0: derive from epochs
  int epochs = 300;
  int batch = 16;
  int context = 2;
  int log_every = 1;
  int val_every = 100;
  int val_windows = 0;  // 0: whole validation split
  int checkpoint_every = 0;  // 0: only at the end
};

struct DataConfig {
  std::string path;  // STGRID file; empty: generate in memory
  std::string kind = "advection";
  int length = 64;
  int sequences = 1;
  double vx = 1.0;
  double vy = 0.0;
  int blobs = 3;
  double noise_scale = 0.05;
  double diffusion = 0.2;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
};

struct EvalConfig {
  int steps = 10;
  int trajectories = 4;
  std::string leads = "1,3,5,10";
  int windows = 8;  // test windows averaged; 0: all
  bool use_ema = true;
};

struct RunSection {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/stflow";
};

struct RunConfig {
  ModelConfig model;
  AdamConfig optim;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  RunSection run;

  /// Throws ConfigError describing the first invalid field.
  void validate() const;
  /// Sets one `section.key`; throws ConfigError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  std::vector<int> lead_list() const;
};

/// Canonical text: one `key=value` per line, keys sorted, reals at 17 digits.
std::string serialize(const RunConfig& config);
/// Applies `key=value` lines on top of `config`; blank lines and `#`
/// comments are skipped.
void apply_config_text(RunConfig& config, const std::string& text);
/// apply_config_text over the defaults.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& config);

std::vector<std::string> config_keys();

/// "desk" (16x16, 2 scales of 2 steps, batch 16) or "full" (3 scales of 4, batch 64).
RunConfig preset(const std::string& name);

/// Applies STFLOW_SEED when set.
void apply_environment(RunConfig& config);

}  // namespace stflow
