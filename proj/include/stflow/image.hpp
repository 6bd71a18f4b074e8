#pragma once

// Plain (P2) portable graymap output for frames and spread fields.

#include <filesystem>
#include <iosfwd>

#include "stflow/tensor.hpp"

namespace stflow {

/// Grey levels 0..255 map [lo, hi] linearly, clamped. Channels of a
/// [C,H,W] frame are stacked vertically.
void write_pgm(std::ostream& out, const Tensor& frame, double lo, double hi);
void save_pgm(const std::filesystem::path& path, const Tensor& frame, double lo, double hi);

}  // namespace stflow
