#include "rigsplat/optimization.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rigsplat {

double lr_schedule(double base_lr, std::int64_t iter, std::int64_t total) {
    if (total <= 0) return base_lr;
    double t = static_cast<double>(iter) / static_cast<double>(total);
    return base_lr * std::pow(0.1, t);
}

void adam_step(std::span<double> params, std::span<const double> grads, std::span<double> m,
               std::span<double> v, std::int64_t step, double lr, const AdamConfig& config,
               const std::string& group) {
    if (params.size() != grads.size() || params.size() != m.size() || params.size() != v.size())
        throw ContractError("adam_step: array lengths differ for group " + group);
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double g = grads[i];
        if (!std::isfinite(g))
            throw NonFiniteError("gradient for parameter group " + group,
                                 static_cast<std::int64_t>(i));
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
        double m_hat = m[i] / bc1;
        double v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
}

// --------------------------------------------------------------------------
// SplatAdam
// --------------------------------------------------------------------------

void SplatAdam::init(Eigen::Index n) {
    step_count = 0;
    m_position = PointArray::Zero(n, 3);
    v_position = PointArray::Zero(n, 3);
    m_rotation = QuatArray::Zero(n, 4);
    v_rotation = QuatArray::Zero(n, 4);
    m_log_scale = PointArray::Zero(n, 3);
    v_log_scale = PointArray::Zero(n, 3);
    m_opacity = VecX::Zero(n);
    v_opacity = VecX::Zero(n);
    m_color = PointArray::Zero(n, 3);
    v_color = PointArray::Zero(n, 3);
}

void SplatAdam::check_lengths(Eigen::Index n) const {
    if (m_position.rows() != n || v_position.rows() != n || m_rotation.rows() != n ||
        v_rotation.rows() != n || m_log_scale.rows() != n || v_log_scale.rows() != n ||
        m_opacity.size() != n || v_opacity.size() != n || m_color.rows() != n ||
        v_color.rows() != n)
        throw ContractError("Adam moment arrays do not match gaussian count");
}

namespace {

template <typename M>
std::span<double> flat(M& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
}
template <typename M>
std::span<const double> cflat(const M& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
}

}  // namespace

void SplatAdam::step(BoundGaussianSet& set, const BindGrads& grads, const PerGroupLr& lr,
                     double position_lr_scale, std::int64_t iter, std::int64_t total_iters) {
    check_lengths(set.size());
    ++step_count;
    adam_step(flat(set.local_position), cflat(grads.d_position), flat(m_position),
              flat(v_position), step_count,
              lr_schedule(lr.position * position_lr_scale, iter, total_iters), config, "position");
    adam_step(flat(set.local_rotation), cflat(grads.d_rotation), flat(m_rotation),
              flat(v_rotation), step_count, lr_schedule(lr.rotation, iter, total_iters), config,
              "rotation");
    adam_step(flat(set.local_log_scale), cflat(grads.d_log_scale), flat(m_log_scale),
              flat(v_log_scale), step_count, lr_schedule(lr.log_scale, iter, total_iters), config,
              "log_scale");
    adam_step(flat(set.opacity_logit), cflat(grads.d_opacity_logit), flat(m_opacity),
              flat(v_opacity), step_count, lr_schedule(lr.opacity, iter, total_iters), config,
              "opacity");
    adam_step(flat(set.color_raw), cflat(grads.d_color), flat(m_color), flat(v_color), step_count,
              lr_schedule(lr.color, iter, total_iters), config, "color");
}

// --------------------------------------------------------------------------
// Density stats
// --------------------------------------------------------------------------

void DensityStats::init(Eigen::Index n) {
    grad_norm_accum = VecX::Zero(n);
    visible_count = VecX::Zero(n);
    max_world_scale = VecX::Zero(n);
}

void DensityStats::reset() { init(grad_norm_accum.size()); }

void accumulate_density_stats(DensityStats& stats, const WorldGrads& grads,
                              const WorldGaussians& world, int image_width, int image_height) {
    const Eigen::Index n = grads.d_mean2d.rows();
    if (stats.grad_norm_accum.size() != n || world.size() != n)
        throw ContractError("density stats arrays do not match gaussian count");
    const double sx = image_width / 2.0;
    const double sy = image_height / 2.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!grads.visible[i]) continue;
        double gx = grads.d_mean2d(i, 0) * sx;
        double gy = grads.d_mean2d(i, 1) * sy;
        stats.grad_norm_accum[i] += std::sqrt(gx * gx + gy * gy);
        stats.visible_count[i] += 1.0;
        stats.max_world_scale[i] =
            std::max(stats.max_world_scale[i], world.scales.row(i).maxCoeff());
    }
}

// --------------------------------------------------------------------------
// Densify / prune
// --------------------------------------------------------------------------

namespace {

template <typename M>
M select_rows(const M& m, const std::vector<Eigen::Index>& rows) {
    M out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
    return out;
}

VecX select_rows(const VecX& v, const std::vector<Eigen::Index>& rows) {
    VecX out(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[rows[i]];
    return out;
}

template <typename M>
void append_zero_rows(M& m, Eigen::Index extra) {
    Eigen::Index old = m.rows();
    m.conservativeResize(old + extra, Eigen::NoChange);
    m.bottomRows(extra).setZero();
}

void append_zero_rows(VecX& v, Eigen::Index extra) {
    Eigen::Index old = v.size();
    v.conservativeResize(old + extra);
    v.tail(extra).setZero();
}

void apply_keep(BoundGaussianSet& set, SplatAdam& adam, DensityStats& stats,
                const std::vector<Eigen::Index>& keep) {
    std::vector<std::uint32_t> tri(keep.size());
    for (std::size_t i = 0; i < keep.size(); ++i) tri[i] = set.triangle_index[keep[i]];
    set.triangle_index = std::move(tri);
    set.local_position = select_rows(set.local_position, keep);
    set.local_rotation = select_rows(set.local_rotation, keep);
    set.local_log_scale = select_rows(set.local_log_scale, keep);
    set.opacity_logit = select_rows(set.opacity_logit, keep);
    set.color_raw = select_rows(set.color_raw, keep);
    adam.m_position = select_rows(adam.m_position, keep);
    adam.v_position = select_rows(adam.v_position, keep);
    adam.m_rotation = select_rows(adam.m_rotation, keep);
    adam.v_rotation = select_rows(adam.v_rotation, keep);
    adam.m_log_scale = select_rows(adam.m_log_scale, keep);
    adam.v_log_scale = select_rows(adam.v_log_scale, keep);
    adam.m_opacity = select_rows(adam.m_opacity, keep);
    adam.v_opacity = select_rows(adam.v_opacity, keep);
    adam.m_color = select_rows(adam.m_color, keep);
    adam.v_color = select_rows(adam.v_color, keep);
    stats.grad_norm_accum = select_rows(stats.grad_norm_accum, keep);
    stats.visible_count = select_rows(stats.visible_count, keep);
    stats.max_world_scale = select_rows(stats.max_world_scale, keep);
}

void grow(BoundGaussianSet& set, SplatAdam& adam, DensityStats& stats, Eigen::Index extra) {
    Eigen::Index old = set.size();
    set.resize(old + extra);
    append_zero_rows(adam.m_position, extra);
    append_zero_rows(adam.v_position, extra);
    append_zero_rows(adam.m_rotation, extra);
    append_zero_rows(adam.v_rotation, extra);
    append_zero_rows(adam.m_log_scale, extra);
    append_zero_rows(adam.v_log_scale, extra);
    append_zero_rows(adam.m_opacity, extra);
    append_zero_rows(adam.v_opacity, extra);
    append_zero_rows(adam.m_color, extra);
    append_zero_rows(adam.v_color, extra);
    append_zero_rows(stats.grad_norm_accum, extra);
    append_zero_rows(stats.visible_count, extra);
    append_zero_rows(stats.max_world_scale, extra);
}

double normal_draw(std::mt19937_64& rng) {
    // Box-Muller on raw 53-bit uniforms; keeps draws portable across stdlibs.
    double u1 = ((rng() >> 11) + 0.5) * 0x1.0p-53;
    double u2 = ((rng() >> 11) + 0.5) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

DensifyReport densify_and_prune(BoundGaussianSet& set, SplatAdam& adam, DensityStats& stats,
                                const DensifyConfig& config, std::int64_t iter,
                                std::mt19937_64& rng) {
    if (iter % config.interval != 0)
        throw ContractError("densify_and_prune called off-schedule at iter " +
                            std::to_string(iter));
    set.validate();
    adam.check_lengths(set.size());

    DensifyReport report;
    report.count_before = set.size();

    // Prune: always allowed.
    std::vector<Eigen::Index> keep;
    keep.reserve(set.size());
    for (Eigen::Index i = 0; i < set.size(); ++i) {
        if (sigmoid(set.opacity_logit[i]) >= config.prune_opacity_threshold)
            keep.push_back(i);
    }
    report.pruned = set.size() - static_cast<Eigen::Index>(keep.size());
    if (report.pruned > 0) apply_keep(set, adam, stats, keep);

    // Densify only while at or under the cap.
    if (set.size() <= config.max_gaussians) {
        std::vector<Eigen::Index> clone_idx, split_idx;
        for (Eigen::Index i = 0; i < set.size(); ++i) {
            if (stats.visible_count[i] <= 0.0) continue;
            double mean_grad = stats.grad_norm_accum[i] / stats.visible_count[i];
            if (mean_grad <= config.grad_threshold) continue;
            if (stats.max_world_scale[i] < config.split_scale_threshold)
                clone_idx.push_back(i);
            else
                split_idx.push_back(i);
        }
        report.cloned = static_cast<std::int64_t>(clone_idx.size());
        report.split = static_cast<std::int64_t>(split_idx.size());

        const Eigen::Index base = set.size();
        const Eigen::Index extra = static_cast<Eigen::Index>(clone_idx.size()) +
                                   static_cast<Eigen::Index>(split_idx.size()) * config.children;
        if (extra > 0) {
            grow(set, adam, stats, extra);
            Eigen::Index cursor = base;
            for (Eigen::Index src : clone_idx) set.set(cursor++, set.get(src));
            const double log_factor = std::log(config.split_factor);
            for (Eigen::Index src : split_idx) {
                BoundGaussian parent = set.get(src);
                for (int c = 0; c < config.children; ++c) {
                    BoundGaussian child = parent;  // inherits the parent triangle
                    Vec3 eps(normal_draw(rng), normal_draw(rng), normal_draw(rng));
                    Vec3 sigma = parent.local_log_scale.array().exp().matrix();
                    child.local_position +=
                        parent.local_rotation.normalized() * (eps.cwiseProduct(sigma));
                    child.local_log_scale = parent.local_log_scale.array() - log_factor;
                    set.set(cursor++, child);
                }
            }
            // Split parents are replaced by their children.
            std::vector<Eigen::Index> final_keep;
            final_keep.reserve(set.size() - static_cast<Eigen::Index>(split_idx.size()));
            std::vector<std::uint8_t> is_split_parent(base, 0);
            for (Eigen::Index src : split_idx) is_split_parent[src] = 1;
            for (Eigen::Index i = 0; i < base; ++i)
                if (!is_split_parent[i]) final_keep.push_back(i);
            for (Eigen::Index i = base; i < set.size(); ++i) final_keep.push_back(i);
            apply_keep(set, adam, stats, final_keep);
        }
    }

    stats.reset();
    report.count_after = set.size();
    set.validate();
    adam.check_lengths(set.size());
    return report;
}

}  // namespace rigsplat
