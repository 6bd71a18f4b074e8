#include "stflow/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include "stflow/errors.hpp"

namespace stflow {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

double mse(const Tensor& pred, const Tensor& target) {
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.at(i) - target.at(i);
    total += d * d;
  }
  return total / static_cast<double>(pred.size());
}

double ssim_plane(const double* x, const double* y, int h, int w, double data_range, const SsimOptions& o) {
  const int win = o.window;
  const double n = static_cast<double>(win) * win;
  const double c1 = (o.k1 * data_range) * (o.k1 * data_range);
  const double c2 = (o.k2 * data_range) * (o.k2 * data_range);
  const double cov_norm = n / (n - 1.0);
  double total = 0.0;
  int count = 0;
  for (int i = 0; i + win <= h; ++i) {
    for (int j = 0; j + win <= w; ++j) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      for (int a = 0; a < win; ++a) {
        for (int b = 0; b < win; ++b) {
          const double xv = x[(i + a) * w + j + b];
          const double yv = y[(i + a) * w + j + b];
          sx += xv;
          sy += yv;
          sxx += xv * xv;
          syy += yv * yv;
          sxy += xv * yv;
        }
      }
      const double mx = sx / n, my = sy / n;
      const double vx = cov_norm * (sxx / n - mx * mx);
      const double vy = cov_norm * (syy / n - my * my);
      const double vxy = cov_norm * (sxy / n - mx * my);
      total += ((2 * mx * my + c1) * (2 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / count;
}

}  // namespace

double rmse(const Tensor& pred, const Tensor& target) {
  require_same(pred, target, "rmse");
  return std::sqrt(mse(pred, target));
}

double psnr(const Tensor& pred, const Tensor& target, double data_range) {
  require_same(pred, target, "psnr");
  if (!(data_range > 0.0)) throw NumericError("psnr needs data_range > 0");
  const double m = mse(pred, target);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / m);
}

double ssim(const Tensor& pred, const Tensor& target, double data_range, const SsimOptions& options) {
  require_same(pred, target, "ssim");
  if (!(data_range > 0.0)) throw NumericError("ssim needs data_range > 0");
  if (pred.rank() != 2 && pred.rank() != 3) throw ShapeError("ssim expects [H,W] or [C,H,W]");
  const int h = pred.dim(-2), w = pred.dim(-1);
  if (h < options.window || w < options.window) {
    throw ShapeError("ssim: image " + shape_string(pred.shape()) + " is smaller than the " +
                     std::to_string(options.window) + "x" + std::to_string(options.window) + " window");
  }
  const int planes = pred.rank() == 3 ? pred.dim(0) : 1;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  double total = 0.0;
  for (int c = 0; c < planes; ++c) {
    total += ssim_plane(pred.data().data() + c * plane, target.data().data() + c * plane, h, w, data_range, options);
  }
  return total / planes;
}

Tensor ensemble_mean(const Tensor& rollouts) {
  if (rollouts.rank() != 5) throw ShapeError("rollouts must be [m,n,C,H,W]");
  const int m = rollouts.dim(0);
  const std::size_t per = rollouts.size() / m;
  std::vector<double> out(per, 0.0);
  for (int k = 0; k < m; ++k) {
    for (std::size_t i = 0; i < per; ++i) out[i] += rollouts.at(k * per + i);
  }
  for (auto& v : out) v /= m;
  return Tensor({rollouts.dim(1), rollouts.dim(2), rollouts.dim(3), rollouts.dim(4)}, std::move(out));
}

RolloutReport rollout_report(const Tensor& rollouts, std::span<const Tensor> targets, const GridMeta& meta,
                             int context_length) {
  if (rollouts.rank() != 5) throw ShapeError("rollouts must be [m,n,C,H,W]");
  const int m = rollouts.dim(0);
  const int n = rollouts.dim(1);
  if (static_cast<int>(targets.size()) != n) {
    throw ShapeError("rollout has " + std::to_string(n) + " steps but " + std::to_string(targets.size()) +
                     " targets were given");
  }
  const Shape frame{rollouts.dim(2), rollouts.dim(3), rollouts.dim(4)};
  const std::size_t per = shape_size(frame);
  const double range = meta.max_z - meta.min_z;
  const Tensor physical = denormalize(rollouts, meta);
  const Tensor mean_all = ensemble_mean(physical);

  RolloutReport r;
  r.context_length = context_length;
  for (int s = 0; s < n; ++s) {
    const Tensor pred = reshape(slice(mean_all, s, s + 1), frame);
    const Tensor truth = denormalize(targets[s], meta);
    r.rmse.push_back(rmse(pred, truth));
    r.psnr.push_back(psnr(pred, truth, range));
    r.ssim.push_back(ssim(pred, truth, range));

    std::vector<double> sd(per, 0.0);
    for (std::size_t i = 0; i < per; ++i) {
      const double mu = pred.at(i);
      double acc = 0.0;
      for (int k = 0; k < m; ++k) {
        const double d = physical.at((static_cast<std::size_t>(k) * n + s) * per + i) - mu;
        acc += d * d;
      }
      sd[i] = std::sqrt(acc / m);
    }
    double avg = 0.0;
    for (double v : sd) avg += v;
    r.ens_std_mean.push_back(avg / static_cast<double>(per));
    r.std_field.emplace_back(frame, std::move(sd));
  }
  return r;
}

Tensor persistence_baseline(std::span<const Tensor> context, int steps) {
  if (context.empty()) throw ShapeError("persistence needs a non-empty context");
  if (steps < 1) throw ShapeError("persistence needs steps >= 1");
  const Tensor& last = context.back();
  std::vector<double> out;
  out.reserve(last.size() * steps);
  for (int s = 0; s < steps; ++s) out.insert(out.end(), last.data().begin(), last.data().end());
  Shape shape{steps};
  shape.insert(shape.end(), last.shape().begin(), last.shape().end());
  return Tensor(std::move(shape), std::move(out));
}

void write_metrics_csv(std::ostream& out, const RolloutReport& report) {
  out << "step,rmse,ssim,psnr,ens_std_mean\n";
  char line[256];
  for (int s = 0; s < report.steps(); ++s) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g\n", s + 1, report.rmse[s], report.ssim[s],
                  report.psnr[s], report.ens_std_mean[s]);
    out << line;
  }
}

}  // namespace stflow
