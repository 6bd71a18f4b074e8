#pragma once

// Grid sequences, min-max normalization, temporal splits, context windows,
// synthetic generators and the STGRID binary format.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stflow/tensor.hpp"

namespace stflow {

struct GridMeta {
  std::string variable = "field";
  std::string units = "1";
  double hours_per_step = 1.0;
  double min_z = 0.0;
  double max_z = 1.0;
  /// Frames per independent sequence; 0 means one continuous sequence.
  int segment_length = 0;
};

struct GridSequence {
  Tensor frames;  // [T,C,H,W], physical units
  GridMeta meta;

  int length() const { return frames.dim(0); }
  Shape frame_shape() const { return {frames.dim(1), frames.dim(2), frames.dim(3)}; }
  Tensor frame(int t) const;
};

struct SampleTuple {
  std::vector<Tensor> context;  // chronological
  Tensor target;
  int start = 0;  // index of the first context frame
};

// --- normalization ------------------------------------------------------------

/// (min, max) over the listed frames only. Throws on an empty list or a
/// constant field.
std::pair<double, double> normalize_fit(const GridSequence& raw, std::span<const int> frame_indices);
/// Frames touched by windows starting at `starts`.
std::vector<int> frames_of_windows(std::span<const int> starts, int context);

/// (z - min) / (max - min), unclipped. `out_of_range` counts values outside [0, 1].
Tensor normalize(const Tensor& raw, const GridMeta& meta, std::size_t* out_of_range = nullptr);
Tensor denormalize(const Tensor& x, const GridMeta& meta);

// --- splits and windows ---------------------------------------------------------

struct Splits {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
};

/// Largest-remainder split of window indices 0..n-1 after a seeded shuffle.
/// Each list is sorted ascending.
Splits split_temporal(int n_windows, std::array<double, 3> fractions, std::uint64_t seed);

/// Valid window start indices; windows never cross a segment boundary.
std::vector<int> window_starts(const GridSequence& seq, int context);
SampleTuple window_at(const GridSequence& seq, int start, int context);
std::vector<SampleTuple> make_windows(const GridSequence& seq, int context = 2);

// --- synthetic data -------------------------------------------------------------

struct AdvectionParams {
  int height = 16;
  int width = 16;
  int length = 64;  // frames per sequence
  int sequences = 1;
  double vx = 1.0;  // pixels per step along width
  double vy = 0.0;  // pixels per step along height
  int blobs = 3;
  std::uint64_t seed = 0;
};

/// Gaussian blobs translated at constant velocity on a periodic domain.
GridSequence synth_advection(const AdvectionParams& p);

struct StochasticParams {
  int height = 16;
  int width = 16;
  int length = 64;
  int sequences = 1;
  double noise_scale = 0.05;
  double diffusion = 0.2;
  std::uint64_t seed = 0;
};

/// One periodic diffusion step plus smoothed Gaussian forcing, clamped to [0, 1].
Tensor stochastic_step(const Tensor& field, double noise_scale, double diffusion, Rng& rng);
GridSequence synth_stochastic(const StochasticParams& p);

// --- STGRID ------------------------------------------------------------------------

void save_grid(const std::filesystem::path& path, const GridSequence& seq);
GridSequence load_grid(const std::filesystem::path& path);
void write_grid(std::ostream& out, const GridSequence& seq);
GridSequence read_grid(std::istream& in);

}  // namespace stflow
