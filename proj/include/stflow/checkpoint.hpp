#pragma once

// STFLOWCK checkpoint files: configuration, parameters, optimizer state,
// EMA shadow, step counter and seed.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "stflow/config.hpp"
#include "stflow/model.hpp"
#include "stflow/optim.hpp"

namespace stflow {

struct Checkpoint {
  RunConfig config;
  std::vector<std::string> names;
  std::vector<Tensor> values;
  AdamState optim;  // moments aligned with `values`; shadow holds EMA values
  std::uint64_t step = 0;
  std::uint64_t seed = 0;

  static Checkpoint capture(const RunConfig& config, const Model& model, const AdamState& optim,
                            std::uint64_t seed);
  /// Rebuilds the model with raw (or EMA) parameter values.
  Model restore_model(bool use_ema = false) const;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ck);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stflow
