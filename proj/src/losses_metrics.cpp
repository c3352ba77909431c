#include "rigsplat/losses_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace rigsplat {

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b)) throw ContractError(std::string(what) + ": image shapes differ");
}

std::vector<double> gaussian_kernel(int window, double sigma) {
    std::vector<double> k(window);
    double sum = 0.0;
    double half = (window - 1) / 2.0;
    for (int i = 0; i < window; ++i) {
        double d = i - half;
        k[i] = std::exp(-0.5 * d * d / (sigma * sigma));
        sum += k[i];
    }
    for (double& v : k) v /= sum;
    return k;
}

// Plain 2D channel plane.
struct Plane {
    int h = 0, w = 0;
    std::vector<double> v;
    Plane() = default;
    Plane(int h_, int w_) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, 0.0) {}
    double& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
    double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

// Separable 'valid' filter: out(y,x) = sum_ij k_i k_j in(y+i, x+j).
Plane filter_valid(const Plane& in, const std::vector<double>& k) {
    int window = static_cast<int>(k.size());
    Plane tmp(in.h, in.w - window + 1);
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < tmp.w; ++x) {
            double acc = 0.0;
            for (int i = 0; i < window; ++i) acc += k[i] * in.at(y, x + i);
            tmp.at(y, x) = acc;
        }
    Plane out(in.h - window + 1, tmp.w);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
            double acc = 0.0;
            for (int i = 0; i < window; ++i) acc += k[i] * tmp.at(y + i, x);
            out.at(y, x) = acc;
        }
    return out;
}

// Adjoint of filter_valid: spreads a valid-grid field back onto the full grid.
Plane spread_full(const Plane& in, const std::vector<double>& k, int full_h, int full_w) {
    int window = static_cast<int>(k.size());
    Plane tmp(full_h, in.w);
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x) {
            double val = in.at(y, x);
            if (val == 0.0) continue;
            for (int i = 0; i < window; ++i) tmp.at(y + i, x) += k[i] * val;
        }
    Plane out(full_h, full_w);
    for (int y = 0; y < full_h; ++y)
        for (int x = 0; x < in.w; ++x) {
            double val = tmp.at(y, x);
            if (val == 0.0) continue;
            for (int i = 0; i < window; ++i) out.at(y, x + i) += k[i] * val;
        }
    return out;
}

Plane channel_plane(const Image& img, int c) {
    Plane p(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) p.at(y, x) = img.at(y, x, c);
    return p;
}

}  // namespace

LossResult l1_loss(const Image& pred, const Image& gt) {
    require_same_shape(pred, gt, "l1_loss");
    LossResult out;
    out.grad = Image(pred.height, pred.width, pred.channels);
    const double inv_count = 1.0 / static_cast<double>(pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double diff = pred.data[i] - gt.data[i];
        sum += std::abs(diff);
        out.grad.data[i] = diff > 0.0 ? inv_count : (diff < 0.0 ? -inv_count : 0.0);
    }
    out.value = sum * inv_count;
    return out;
}

LossResult ssim(const Image& pred, const Image& gt, int window, double sigma, double c1,
                double c2) {
    require_same_shape(pred, gt, "ssim");
    if (pred.height < window || pred.width < window)
        throw ContractError("ssim: image smaller than window");
    const std::vector<double> k = gaussian_kernel(window, sigma);
    const int vh = pred.height - window + 1;
    const int vw = pred.width - window + 1;
    const double weight = 1.0 / (static_cast<double>(pred.channels) * vh * vw);

    LossResult out;
    out.grad = Image(pred.height, pred.width, pred.channels);
    double total = 0.0;
    for (int c = 0; c < pred.channels; ++c) {
        Plane x = channel_plane(pred, c);
        Plane y = channel_plane(gt, c);
        Plane xx(x.h, x.w), yy(x.h, x.w), xy(x.h, x.w);
        for (int i = 0; i < x.h; ++i)
            for (int jx = 0; jx < x.w; ++jx) {
                double xv = x.at(i, jx), yv = y.at(i, jx);
                xx.at(i, jx) = xv * xv;
                yy.at(i, jx) = yv * yv;
                xy.at(i, jx) = xv * yv;
            }
        Plane mu_x = filter_valid(x, k);
        Plane mu_y = filter_valid(y, k);
        Plane x2f = filter_valid(xx, k);
        Plane y2f = filter_valid(yy, k);
        Plane xyf = filter_valid(xy, k);

        Plane d_mu(vh, vw), d_x2(vh, vw), d_xy(vh, vw);
        for (int i = 0; i < vh; ++i) {
            for (int jx = 0; jx < vw; ++jx) {
                double mx = mu_x.at(i, jx), my = mu_y.at(i, jx);
                double sx2 = x2f.at(i, jx) - mx * mx;
                double sy2 = y2f.at(i, jx) - my * my;
                double sxy = xyf.at(i, jx) - mx * my;
                double a1 = 2.0 * mx * my + c1;
                double a2 = 2.0 * sxy + c2;
                double b1 = mx * mx + my * my + c1;
                double b2 = sx2 + sy2 + c2;
                double denom = b1 * b2;
                double s = (a1 * a2) / denom;
                total += weight * s;
                d_mu.at(i, jx) =
                    weight * ((2.0 * my * (a2 - a1)) / denom - s * (2.0 * mx * (b2 - b1)) / denom);
                d_x2.at(i, jx) = weight * (-s / b2);
                d_xy.at(i, jx) = weight * (2.0 * a1 / denom);
            }
        }
        Plane g_mu = spread_full(d_mu, k, pred.height, pred.width);
        Plane g_x2 = spread_full(d_x2, k, pred.height, pred.width);
        Plane g_xy = spread_full(d_xy, k, pred.height, pred.width);
        for (int i = 0; i < pred.height; ++i)
            for (int jx = 0; jx < pred.width; ++jx)
                out.grad.at(i, jx, c) = g_mu.at(i, jx) + 2.0 * x.at(i, jx) * g_x2.at(i, jx) +
                                        y.at(i, jx) * g_xy.at(i, jx);
    }
    out.value = total;
    return out;
}

LossResult mask_regularization(const Image& alpha, const Image& mask) {
    require_same_shape(alpha, mask, "mask_regularization");
    LossResult out;
    out.grad = Image(alpha.height, alpha.width, alpha.channels);
    std::size_t outside = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < alpha.size(); ++i) {
        if (mask.data[i] < 0.5) {
            sum += alpha.data[i];
            ++outside;
        }
    }
    if (outside == 0) return out;
    out.value = sum / static_cast<double>(outside);
    double g = 1.0 / static_cast<double>(outside);
    for (std::size_t i = 0; i < alpha.size(); ++i)
        if (mask.data[i] < 0.5) out.grad.data[i] = g;
    return out;
}

double psnr(const Image& pred, const Image& gt) {
    require_same_shape(pred, gt, "psnr");
    double mse = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double d = pred.data[i] - gt.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(pred.size());
    if (mse <= 0.0) return 99.0;
    return std::min(99.0, -10.0 * std::log10(mse));
}

TotalLoss total_loss(const Image& pred, const Image& alpha, const Image& gt, const Image& mask,
                     const LossWeights& weights) {
    weights.validate();
    TotalLoss out;
    out.d_pred = Image(pred.height, pred.width, pred.channels);
    out.d_alpha = Image(alpha.height, alpha.width, alpha.channels);
    if (weights.w_l1 > 0.0) {
        LossResult l1 = l1_loss(pred, gt);
        out.value += weights.w_l1 * l1.value;
        for (std::size_t i = 0; i < out.d_pred.size(); ++i)
            out.d_pred.data[i] += weights.w_l1 * l1.grad.data[i];
    }
    if (weights.w_ssim > 0.0) {
        LossResult s = ssim(pred, gt);
        out.value += weights.w_ssim * (1.0 - s.value);
        for (std::size_t i = 0; i < out.d_pred.size(); ++i)
            out.d_pred.data[i] -= weights.w_ssim * s.grad.data[i];
    }
    if (weights.w_mask > 0.0) {
        LossResult m = mask_regularization(alpha, mask);
        out.value += weights.w_mask * m.value;
        for (std::size_t i = 0; i < out.d_alpha.size(); ++i)
            out.d_alpha.data[i] += weights.w_mask * m.grad.data[i];
    }
    return out;
}

namespace {
std::optional<PerceptualMetricFn> g_lpips;
}

void register_lpips_provider(PerceptualMetricFn fn) { g_lpips = std::move(fn); }

const PerceptualMetricFn* lpips_provider() { return g_lpips ? &*g_lpips : nullptr; }

}  // namespace rigsplat
