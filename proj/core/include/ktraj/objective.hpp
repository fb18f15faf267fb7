#pragma once

// Losses and evaluation metrics: L1, windowed SSIM, the hybrid image loss,
// soft-shrinkage band penalties, PSNR, and the paired Wilcoxon signed-rank
// test. Each training loss exists in two forms: a plain function for metrics
// and a tape node for differentiable use.

#include <vector>

#include "ktraj/diffcore.hpp"

namespace ktraj {

// One training objective evaluation. total = image_loss
// + lambda1 * penalty_v + lambda2 * penalty_a, and image_loss
// = l1 + mu * ssim_loss with ssim_loss = 1 - mean SSIM.
struct LossReport {
  double image_loss = 0.0;
  double l1 = 0.0;
  double ssim_loss = 0.0;
  double penalty_v = 0.0;
  double penalty_a = 0.0;
  double total = 0.0;
};

// Mean absolute difference. Equal lengths required.
double l1_loss(const std::vector<double>& x, const std::vector<double>& y);

struct SsimResult {
  double mean = 0.0;
  std::vector<double> map;  // per-window SSIM, row-major
  int map_h = 0;
  int map_w = 0;
};

// Windowed SSIM with a uniform (box) window, C1 = (0.01 L)^2, C2 = (0.03 L)^2,
// averaged over valid (fully interior) window positions. `x`, `y` are h*w
// row-major; the window must fit inside the image and L must be positive.
SsimResult ssim(const std::vector<double>& x, const std::vector<double>& y, int h, int w,
                double dynamic_range, int window = 7);

// l1_loss + mu * (1 - mean SSIM).
double hybrid_loss(const std::vector<double>& x, const std::vector<double>& y, int h, int w,
                   double dynamic_range, double mu = 1.0, int window = 7);

// Mean over elements of max(|b| - limit, 0); zero inside the band [-c, c].
double shrinkage_penalty(const std::vector<double>& values, double limit);

// 10 log10(peak^2 / MSE); identical inputs give +infinity.
double psnr(const std::vector<double>& x, const std::vector<double>& ref, double peak);

struct WilcoxonResult {
  double statistic = 0.0;  // min(W+, W-) over nonzero differences
  double p_value = 1.0;    // two-sided
};

// Paired Wilcoxon signed-rank test on a - b. Zero differences are dropped;
// ties share average ranks. Exact sign-flip distribution up to 20 nonzero
// pairs, normal approximation with tie correction above. Lengths must match
// and hold at least five pairs; all-zero differences are undefined.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

// Tape nodes. Inputs must share one shape, rank (H, W) or (1, H, W); each
// returns a scalar. Gradients flow to both arguments where required.
diff::TapeTensor l1_node(diff::Tape& tape, const diff::TapeTensor& x, const diff::TapeTensor& y);
diff::TapeTensor ssim_node(diff::Tape& tape, const diff::TapeTensor& x, const diff::TapeTensor& y,
                           double dynamic_range, int window = 7);  // mean SSIM
diff::TapeTensor hybrid_node(diff::Tape& tape, const diff::TapeTensor& x,
                             const diff::TapeTensor& y, double dynamic_range, double mu = 1.0,
                             int window = 7);
diff::TapeTensor shrinkage_node(diff::Tape& tape, const diff::TapeTensor& values, double limit);

}  // namespace ktraj
