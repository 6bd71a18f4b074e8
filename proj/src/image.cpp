#include "stflow/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>

#include "stflow/errors.hpp"

namespace stflow {

void write_pgm(std::ostream& out, const Tensor& frame, double lo, double hi) {
  if (frame.rank() != 2 && frame.rank() != 3) throw ShapeError("pgm expects [H,W] or [C,H,W]");
  if (!(hi > lo)) throw NumericError("pgm range must satisfy hi > lo");
  const int w = frame.dim(-1);
  const int rows = static_cast<int>(frame.size() / static_cast<std::size_t>(w));
  out << "P2\n" << w << ' ' << rows << "\n255\n";
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < w; ++c) {
      const double v = frame.at(static_cast<std::size_t>(r) * w + c);
      const double level = std::clamp(std::round(255.0 * (v - lo) / (hi - lo)), 0.0, 255.0);
      out << static_cast<int>(level) << (c + 1 < w ? ' ' : '\n');
    }
  }
}

void save_pgm(const std::filesystem::path& path, const Tensor& frame, double lo, double hi) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_pgm(out, frame, lo, hi);
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace stflow
