#pragma once

#include "rigsplat/camera.hpp"
#include "rigsplat/common.hpp"
#include "rigsplat/image.hpp"
#include "rigsplat/triangle_binding.hpp"

#include <vector>

namespace rigsplat {

// CPU tile-based differentiable rasterizer for world-space 3D Gaussians.
// Front-to-back alpha compositing with analytic reverse-mode gradients for
// every Gaussian parameter. Deterministic for any worker count: tiles only
// prune work, per-pixel inclusion is decided by each Gaussian's own 3-sigma
// AABB, and gradient partials are reduced in fixed tile order.

struct RasterizeConfig {
    int tile_size = 16;              // pixels
    double blur = 0.3;               // screen-space variance floor, px^2
    double alpha_clamp = 0.999;      // max per-sample alpha
    double alpha_min = 1.0 / 255.0;  // contributions below this are skipped
    double transmittance_min = 1e-4; // compositing stops below this
    double frustum_margin = 0.3;     // visibility margin, fraction of image size
    Vec3 background = Vec3::Zero();
    int workers = 1;
};

// Sigma = R * diag(scale)^2 * R^T. Quaternion is normalized internally.
Mat3 compute_cov3d(const Quat& rotation, const Vec3& scale);

struct ProjectedGaussian {
    bool visible = false;
    Vec2 mean2d = Vec2::Zero();     // pixels
    Mat2 cov2d = Mat2::Zero();      // includes blur floor
    double depth = 0.0;             // camera-space z, meters
};

// EWA-style perspective linearization; blur adds an isotropic screen-space
// floor. Invisible Gaussians are flagged, never errored.
ProjectedGaussian project_gaussian(const Vec3& mean, const Mat3& cov3d, const Camera& camera,
                                   double blur = 0.3, double frustum_margin = 0.3);

struct RenderOutput {
    Image rgb;    // H x W x 3
    Image alpha;  // H x W x 1
    // Auxiliaries consumed by rasterize_backward.
    std::vector<ProjectedGaussian> projected;
    std::vector<std::vector<std::int32_t>> tile_gaussians;  // depth-sorted per tile
    int tiles_x = 0, tiles_y = 0;
    RasterizeConfig config;
    Eigen::Index gaussian_count = 0;
};

RenderOutput rasterize(const WorldGaussians& gaussians, const Camera& camera,
                       const RasterizeConfig& config = {});

// Analytic gradients for every world Gaussian parameter given upstream
// gradients on the rendered image and alpha map. `aux` must come from a
// rasterize() call over the same gaussians and camera.
WorldGrads rasterize_backward(const WorldGaussians& gaussians, const Camera& camera,
                              const RenderOutput& aux, const Image& d_rgb,
                              const Image& d_alpha);

}  // namespace rigsplat
