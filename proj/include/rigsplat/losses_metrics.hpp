#pragma once

#include "rigsplat/image.hpp"

#include <functional>
#include <optional>

namespace rigsplat {

struct LossWeights {
    double w_l1 = 0.8;
    double w_ssim = 0.2;
    double w_mask = 0.1;

    void validate() const {
        if (!(w_l1 > 0.0) && !(w_ssim > 0.0) && !(w_mask > 0.0))
            throw ContractError("at least one loss weight must be > 0");
        if (w_l1 < 0.0 || w_ssim < 0.0 || w_mask < 0.0)
            throw ContractError("loss weights must be nonnegative");
    }
};

struct LossResult {
    double value = 0.0;
    Image grad;  // same shape as the differentiated input
};

// Mean absolute error over all pixels/channels; subgradient sign/count.
LossResult l1_loss(const Image& pred, const Image& gt);

// Gaussian-windowed SSIM over the valid region (no padding), averaged over
// channels; returns the SSIM value and its gradient w.r.t. pred.
LossResult ssim(const Image& pred, const Image& gt, int window = 11, double sigma = 1.5,
                double c1 = 0.01 * 0.01, double c2 = 0.03 * 0.03);

// Mean rendered alpha over pixels outside the mask (mask < 0.5).
LossResult mask_regularization(const Image& alpha, const Image& mask);

// 10*log10(1/MSE) on [0,1] images; identical images report the 99 dB cap.
double psnr(const Image& pred, const Image& gt);

struct TotalLoss {
    double value = 0.0;
    Image d_pred;
    Image d_alpha;
};

// w_l1 * L1 + w_ssim * (1 - SSIM) + w_mask * mask regularization.
TotalLoss total_loss(const Image& pred, const Image& alpha, const Image& gt, const Image& mask,
                     const LossWeights& weights);

// Pluggable perceptual-metric hook. The engine ships no provider; when one is
// registered, eval reports include its column.
using PerceptualMetricFn = std::function<double(const Image& pred, const Image& gt)>;
void register_lpips_provider(PerceptualMetricFn fn);
const PerceptualMetricFn* lpips_provider();

}  // namespace rigsplat
