#include "stflow/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "stflow/binary_io.hpp"
#include "stflow/errors.hpp"

namespace stflow {

namespace {

constexpr char kGridMagic[] = "STGRID01";

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Blob {
  double cx, cy, sigma, amplitude;
};

std::vector<Blob> draw_blobs(int n, int height, int width, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double scale = std::min(height, width) / 16.0;
  std::vector<Blob> blobs;
  for (int i = 0; i < n; ++i) {
    Blob b;
    b.cx = unit(rng) * width;
    b.cy = unit(rng) * height;
    b.sigma = (1.5 + unit(rng)) * scale;
    b.amplitude = (0.4 + 0.5 * unit(rng)) / n;
    blobs.push_back(b);
  }
  return blobs;
}

/// Sum of periodic Gaussian blobs shifted by (sx, sy).
void render_blobs(const std::vector<Blob>& blobs, int height, int width, double sx, double sy, double* out) {
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double v = 0.0;
      for (const Blob& b : blobs) {
        const double cx = std::fmod(b.cx + sx, static_cast<double>(width));
        const double cy = std::fmod(b.cy + sy, static_cast<double>(height));
        for (int ky = -2; ky <= 2; ++ky) {
          const double dy = y - cy + ky * height;
          for (int kx = -2; kx <= 2; ++kx) {
            const double dx = x - cx + kx * width;
            v += b.amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
          }
        }
      }
      out[y * width + x] = to_f32(std::clamp(v, 0.0, 1.0));
    }
  }
}

}  // namespace

Tensor GridSequence::frame(int t) const {
  if (t < 0 || t >= length()) throw ShapeError("frame index " + std::to_string(t) + " out of range");
  return reshape(slice(frames, t, t + 1), frame_shape());
}

// --- normalization ------------------------------------------------------------

std::vector<int> frames_of_windows(std::span<const int> starts, int context) {
  std::vector<int> frames;
  for (int s : starts) {
    for (int t = s; t <= s + context; ++t) frames.push_back(t);
  }
  std::sort(frames.begin(), frames.end());
  frames.erase(std::unique(frames.begin(), frames.end()), frames.end());
  return frames;
}

std::pair<double, double> normalize_fit(const GridSequence& raw, std::span<const int> frame_indices) {
  if (frame_indices.empty()) throw ShapeError("normalization needs at least one training frame");
  const std::size_t per_frame = shape_size(raw.frame_shape());
  const auto values = raw.frames.data();
  double lo = INFINITY, hi = -INFINITY;
  for (int t : frame_indices) {
    if (t < 0 || t >= raw.length()) throw ShapeError("frame index " + std::to_string(t) + " out of range");
    for (std::size_t i = 0; i < per_frame; ++i) {
      const double v = values[static_cast<std::size_t>(t) * per_frame + i];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!(lo < hi)) throw NumericError("constant training field: min == max == " + format_double(lo));
  return {lo, hi};
}

Tensor normalize(const Tensor& raw, const GridMeta& meta, std::size_t* out_of_range) {
  if (!(meta.min_z < meta.max_z)) throw NumericError("normalization needs min_z < max_z");
  const double range = meta.max_z - meta.min_z;
  std::vector<double> out(raw.size());
  std::size_t outside = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (raw.at(i) - meta.min_z) / range;
    if (out[i] < 0.0 || out[i] > 1.0) ++outside;
  }
  if (out_of_range) *out_of_range = outside;
  return Tensor(raw.shape(), std::move(out));
}

Tensor denormalize(const Tensor& x, const GridMeta& meta) {
  const double range = meta.max_z - meta.min_z;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * range + meta.min_z;
  return Tensor(x.shape(), std::move(out));
}

// --- splits and windows ---------------------------------------------------------

Splits split_temporal(int n_windows, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw ConfigError("split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

  std::array<int, 3> sizes{};
  std::array<double, 3> remainder{};
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double quota = n_windows * fractions[i];
    sizes[i] = static_cast<int>(std::floor(quota + 1e-9));
    remainder[i] = quota - sizes[i];
    assigned += sizes[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b]; });
  for (int k = 0; assigned < n_windows; ++k, ++assigned) ++sizes[order[k % 3]];
  for (int i = 0; i < 3; ++i) {
    if (fractions[i] > 0.0 && sizes[i] == 0) {
      throw ShapeError("too few windows (" + std::to_string(n_windows) + ") for one window per split");
    }
  }

  std::vector<int> idx(n_windows);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  Splits s;
  s.train.assign(idx.begin(), idx.begin() + sizes[0]);
  s.val.assign(idx.begin() + sizes[0], idx.begin() + sizes[0] + sizes[1]);
  s.test.assign(idx.begin() + sizes[0] + sizes[1], idx.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

std::vector<int> window_starts(const GridSequence& seq, int context) {
  if (context < 1) throw ShapeError("context window must be >= 1");
  const int total = seq.length();
  const int segment = seq.meta.segment_length > 0 ? seq.meta.segment_length : total;
  if (total % segment != 0) throw ShapeError("sequence length is not a multiple of the segment length");
  if (segment < context + 1) {
    throw ShapeError("segments of " + std::to_string(segment) + " frames are too short for context " +
                     std::to_string(context));
  }
  std::vector<int> starts;
  for (int base = 0; base < total; base += segment) {
    for (int s = base; s + context < base + segment; ++s) starts.push_back(s);
  }
  return starts;
}

SampleTuple window_at(const GridSequence& seq, int start, int context) {
  if (context < 1) throw ShapeError("context window must be >= 1");
  if (start < 0 || start + context >= seq.length()) throw ShapeError("window out of range");
  SampleTuple t;
  t.start = start;
  for (int i = 0; i < context; ++i) t.context.push_back(seq.frame(start + i));
  t.target = seq.frame(start + context);
  return t;
}

std::vector<SampleTuple> make_windows(const GridSequence& seq, int context) {
  std::vector<SampleTuple> out;
  for (int s : window_starts(seq, context)) out.push_back(window_at(seq, s, context));
  return out;
}

// --- synthetic data -------------------------------------------------------------

GridSequence synth_advection(const AdvectionParams& p) {
  if (p.height < 1 || p.width < 1 || p.length < 1 || p.sequences < 1 || p.blobs < 1) {
    throw ConfigError("advection sizes must be positive");
  }
  const std::size_t frame = static_cast<std::size_t>(p.height) * p.width;
  std::vector<double> values(frame * p.length * p.sequences);
  for (int s = 0; s < p.sequences; ++s) {
    Rng rng(mix_seed(p.seed, static_cast<std::uint64_t>(s)));
    const auto blobs = draw_blobs(p.blobs, p.height, p.width, rng);
    for (int t = 0; t < p.length; ++t) {
      const double sx = std::fmod(p.vx * t, static_cast<double>(p.width));
      const double sy = std::fmod(p.vy * t, static_cast<double>(p.height));
      render_blobs(blobs, p.height, p.width, sx < 0 ? sx + p.width : sx, sy < 0 ? sy + p.height : sy,
                   values.data() + (static_cast<std::size_t>(s) * p.length + t) * frame);
    }
  }
  GridSequence seq;
  seq.frames = Tensor({p.length * p.sequences, 1, p.height, p.width}, std::move(values));
  seq.meta.variable = "advected_tracer";
  seq.meta.segment_length = p.length;
  return seq;
}

Tensor stochastic_step(const Tensor& field, double noise_scale, double diffusion, Rng& rng) {
  if (noise_scale < 0.0) throw ConfigError("noise_scale must be >= 0");
  if (field.rank() != 3) throw ShapeError("stochastic_step expects [C,H,W]");
  const int c = field.dim(0), h = field.dim(1), w = field.dim(2);
  const auto in = field.data();
  std::vector<double> noise(field.size(), 0.0);
  if (noise_scale > 0.0) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : noise) v = normal(rng);
  }
  auto at = [&](const auto& buf, int ch, int y, int x) {
    y = (y + h) % h;
    x = (x + w) % w;
    return buf[(static_cast<std::size_t>(ch) * h + y) * w + x];
  };
  std::vector<double> out(field.size());
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double centre = at(in, ch, y, x);
        const double lap = at(in, ch, y - 1, x) + at(in, ch, y + 1, x) + at(in, ch, y, x - 1) +
                           at(in, ch, y, x + 1) - 4.0 * centre;
        double smooth = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) smooth += at(noise, ch, y + dy, x + dx);
        }
        const double v = centre + diffusion * lap + noise_scale * smooth / 3.0;
        out[(static_cast<std::size_t>(ch) * h + y) * w + x] = to_f32(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return Tensor(field.shape(), std::move(out));
}

GridSequence synth_stochastic(const StochasticParams& p) {
  if (p.height < 1 || p.width < 1 || p.length < 1 || p.sequences < 1) {
    throw ConfigError("stochastic sizes must be positive");
  }
  if (p.noise_scale < 0.0) throw ConfigError("noise_scale must be >= 0");
  const std::size_t frame = static_cast<std::size_t>(p.height) * p.width;
  std::vector<double> values(frame * p.length * p.sequences);
  for (int s = 0; s < p.sequences; ++s) {
    Rng rng(mix_seed(p.seed, static_cast<std::uint64_t>(s)));
    const auto blobs = draw_blobs(3, p.height, p.width, rng);
    Tensor field({1, p.height, p.width});
    render_blobs(blobs, p.height, p.width, 0.0, 0.0, field.mutable_data().data());
    for (int t = 0; t < p.length; ++t) {
      if (t > 0) field = stochastic_step(field, p.noise_scale, p.diffusion, rng);
      std::copy(field.data().begin(), field.data().end(),
                values.begin() + (static_cast<std::size_t>(s) * p.length + t) * frame);
    }
  }
  GridSequence seq;
  seq.frames = Tensor({p.length * p.sequences, 1, p.height, p.width}, std::move(values));
  seq.meta.variable = "stochastic_tracer";
  seq.meta.segment_length = p.length;
  return seq;
}

// --- STGRID ------------------------------------------------------------------------

void write_grid(std::ostream& out, const GridSequence& seq) {
  if (seq.frames.rank() != 4) throw ShapeError("grid sequence must be [T,C,H,W]");
  io::Writer w(out);
  w.raw(std::string(kGridMagic, 8));
  for (int d : seq.frames.shape()) w.u32(static_cast<std::uint32_t>(d));
  const auto values = seq.frames.data();
  const bool exact_f32 = std::all_of(values.begin(), values.end(), [](double v) { return to_f32(v) == v; });
  w.u8(exact_f32 ? 0 : 1);
  for (double v : values) {
    if (exact_f32) {
      w.f32(static_cast<float>(v));
    } else {
      w.f64(v);
    }
  }
  std::ostringstream meta;
  meta << "variable=" << seq.meta.variable << "\n";
  meta << "units=" << seq.meta.units << "\n";
  meta << "hours_per_step=" << format_double(seq.meta.hours_per_step) << "\n";
  meta << "min_z=" << format_double(seq.meta.min_z) << "\n";
  meta << "max_z=" << format_double(seq.meta.max_z) << "\n";
  meta << "segment_length=" << seq.meta.segment_length << "\n";
  w.str(meta.str());
}

GridSequence read_grid(std::istream& in) {
  io::Reader r(in, 0);
  const std::string magic = r.raw(8, "magic");
  if (magic != std::string(kGridMagic, 8)) r.fail(0, "bad magic (expected STGRID01)");
  Shape shape;
  std::uint64_t count = 1;
  for (int i = 0; i < 4; ++i) {
    const auto at = r.offset();
    const auto d = r.u32();
    if (d == 0) r.fail(at, std::string("dimension ") + "TCHW"[i] + " is zero");
    count *= d;
    if (d > static_cast<std::uint32_t>(std::numeric_limits<int>::max()) || count > (std::uint64_t{1} << 32)) {
      r.fail(at, "dimension overflow");
    }
    shape.push_back(static_cast<int>(d));
  }
  const auto tag_at = r.offset();
  const auto tag = r.u8();
  if (tag > 1) r.fail(tag_at, "unknown dtype tag " + std::to_string(tag));
  std::vector<double> values(count);
  for (auto& v : values) v = tag == 0 ? static_cast<double>(r.f32()) : r.f64();

  GridSequence seq;
  seq.frames = Tensor(std::move(shape), std::move(values));
  const auto meta_at = r.offset();
  std::istringstream meta(r.str());
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) r.fail(meta_at, "malformed metadata line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "variable") {
        seq.meta.variable = value;
      } else if (key == "units") {
        seq.meta.units = value;
      } else if (key == "hours_per_step") {
        seq.meta.hours_per_step = std::stod(value);
      } else if (key == "min_z") {
        seq.meta.min_z = std::stod(value);
      } else if (key == "max_z") {
        seq.meta.max_z = std::stod(value);
      } else if (key == "segment_length") {
        seq.meta.segment_length = std::stoi(value);
      }
    } catch (const std::logic_error&) {
      r.fail(meta_at, "bad metadata value for " + key);
    }
  }
  return seq;
}

void save_grid(const std::filesystem::path& path, const GridSequence& seq) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_grid(out, seq);
}

GridSequence load_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read_grid(in);
}

}  // namespace stflow
