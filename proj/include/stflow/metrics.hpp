#pragma once

// Forecast verification: RMSE, PSNR, SSIM, per-lead rollout curves,
// ensemble spread and the persistence baseline.

#include <iosfwd>
#include <span>
#include <vector>

#include "stflow/data.hpp"
#include "stflow/tensor.hpp"

namespace stflow {

double rmse(const Tensor& pred, const Tensor& target);
/// 10 log10(range^2 / mse); +infinity when mse == 0.
double psnr(const Tensor& pred, const Tensor& target, double data_range);

struct SsimOptions {
  int window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean SSIM over all valid window positions of every channel of [C,H,W]
/// (or [H,W]) inputs, uniform window, sample (co)variances.
double ssim(const Tensor& pred, const Tensor& target, double data_range, const SsimOptions& options = {});

struct RolloutReport {
  std::vector<double> rmse;  // physical units
  std::vector<double> ssim;
  std::vector<double> psnr;  // dB
  std::vector<double> ens_std_mean;
  std::vector<Tensor> std_field;  // per-pixel spread across trajectories, physical units
  int context_length = 0;

  int steps() const { return static_cast<int>(rmse.size()); }
};

/// `rollouts` is [m,n,C,H,W] and `targets` holds n frames, both normalized.
/// Point metrics use the ensemble mean after denormalization.
RolloutReport rollout_report(const Tensor& rollouts, std::span<const Tensor> targets, const GridMeta& meta,
                             int context_length);

/// Mean over trajectories of a [m,n,C,H,W] ensemble, as [n,C,H,W].
Tensor ensemble_mean(const Tensor& rollouts);

/// Repeats the last context frame: [steps,C,H,W].
Tensor persistence_baseline(std::span<const Tensor> context, int steps);

/// step,rmse,ssim,psnr,ens_std_mean with one row per lead time.
void write_metrics_csv(std::ostream& out, const RolloutReport& report);

}  // namespace stflow
