#pragma once

#include "rigsplat/common.hpp"
#include "rigsplat/triangle_binding.hpp"

#include <random>
#include <string>

namespace rigsplat {

// lr = base_lr * 0.1^(iter/total): exponential decay to 10% of the initial
// learning rate over the run.
double lr_schedule(double base_lr, std::int64_t iter, std::int64_t total = 50000);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-15;
};

// Bias-corrected Adam over a flat parameter array. Throws NonFiniteError
// naming `group` if a gradient is non-finite.
void adam_step(std::span<double> params, std::span<const double> grads, std::span<double> m,
               std::span<double> v, std::int64_t step, double lr, const AdamConfig& config,
               const std::string& group);

struct PerGroupLr {
    // Position LR is additionally scaled by scene extent inside the trainer.
    double position = 1.6e-4;
    double rotation = 1e-3;
    double log_scale = 5e-3;
    double opacity = 5e-2;
    double color = 2.5e-3;
};

// Adam moments for every BoundGaussianSet parameter group; arrays track the
// set's length through densify/prune events.
struct SplatAdam {
    AdamConfig config;
    std::int64_t step_count = 0;
    PointArray m_position, v_position;
    QuatArray m_rotation, v_rotation;
    PointArray m_log_scale, v_log_scale;
    VecX m_opacity, v_opacity;
    PointArray m_color, v_color;

    void init(Eigen::Index n);
    void step(BoundGaussianSet& set, const BindGrads& grads, const PerGroupLr& lr,
              double position_lr_scale, std::int64_t iter, std::int64_t total_iters);
    void check_lengths(Eigen::Index n) const;
};

struct DensifyConfig {
    std::int64_t interval = 500;         // iterations between events
    double grad_threshold = 2e-4;        // mean screen-gradient norm (NDC-half units)
    double split_scale_threshold = 0.01; // world meters; >= threshold splits, below clones
    double prune_opacity_threshold = 0.05;
    std::int64_t max_gaussians = 100000;
    double split_factor = 1.6;
    int children = 2;

    void validate(Eigen::Index initial_count) const {
        if (interval <= 0) throw ContractError("densify interval must be > 0");
        if (max_gaussians < initial_count)
            throw ContractError("max_gaussians must be >= initial gaussian count");
        if (children < 2) throw ContractError("densify children must be >= 2");
    }
};

// Running per-Gaussian statistics between densify events.
struct DensityStats {
    VecX grad_norm_accum;   // sum of screen-space positional gradient norms
    VecX visible_count;
    VecX max_world_scale;   // largest world-space scale seen since last event

    void init(Eigen::Index n);
    void reset();
};

// Accumulates screen-space positional gradient norms (normalized to half-image
// units), visibility counts, and the max world scale per Gaussian.
void accumulate_density_stats(DensityStats& stats, const WorldGrads& grads,
                              const WorldGaussians& world, int image_width, int image_height);

struct DensifyReport {
    std::int64_t split = 0;
    std::int64_t cloned = 0;
    std::int64_t pruned = 0;
    Eigen::Index count_before = 0;
    Eigen::Index count_after = 0;
};

// Prune (always) then, while at or under the cap, clone small / split large
// high-gradient Gaussians. Split children inherit the parent triangle, shrink
// by log(split_factor), and jitter inside the parent footprint (seeded).
// Adam moments and stats arrays stay aligned with the set.
DensifyReport densify_and_prune(BoundGaussianSet& set, SplatAdam& adam, DensityStats& stats,
                                const DensifyConfig& config, std::int64_t iter,
                                std::mt19937_64& rng);

}  // namespace rigsplat
