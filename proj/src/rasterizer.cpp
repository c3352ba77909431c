#include "rigsplat/rasterizer.hpp"

#include "rigsplat/parallel.hpp"
#include "rigsplat/quat_math.hpp"

#include <algorithm>
#include <cmath>

namespace rigsplat {

// --------------------------------------------------------------------------
// Camera
// --------------------------------------------------------------------------

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx, double fy,
                       int width, int height, double near, double far) {
    Vec3 z = (target - eye).normalized();
    Vec3 x = z.cross(up).normalized();
    Vec3 y = z.cross(x);  // completes a right-handed frame with image y down
    Camera cam;
    cam.fx = fx;
    cam.fy = fy;
    cam.cx = width / 2.0;
    cam.cy = height / 2.0;
    cam.width = width;
    cam.height = height;
    cam.near = near;
    cam.far = far;
    Mat3 rot;
    rot.row(0) = x;
    rot.row(1) = y;
    rot.row(2) = z;
    cam.world_to_camera = {rot, -(rot * eye)};
    cam.validate();
    return cam;
}

// --------------------------------------------------------------------------
// Projection
// --------------------------------------------------------------------------

Mat3 compute_cov3d(const Quat& rotation, const Vec3& scale) {
    Mat3 r = rotation.normalized().toRotationMatrix();
    return r * scale.array().square().matrix().asDiagonal() * r.transpose();
}

ProjectedGaussian project_gaussian(const Vec3& mean, const Mat3& cov3d, const Camera& camera,
                                   double blur, double frustum_margin) {
    camera.validate();
    ProjectedGaussian out;
    Vec3 t = camera.world_to_camera.apply(mean);
    out.depth = t.z();
    if (!(t.z() > camera.near) || !(t.z() < camera.far)) return out;

    out.mean2d = Vec2(camera.fx * t.x() / t.z() + camera.cx,
                      camera.fy * t.y() / t.z() + camera.cy);
    double mx = frustum_margin * camera.width;
    double my = frustum_margin * camera.height;
    if (out.mean2d.x() < -mx || out.mean2d.x() > camera.width + mx || out.mean2d.y() < -my ||
        out.mean2d.y() > camera.height + my)
        return out;

    Mat23 j;
    j << camera.fx / t.z(), 0.0, -camera.fx * t.x() / (t.z() * t.z()),
         0.0, camera.fy / t.z(), -camera.fy * t.y() / (t.z() * t.z());
    Mat23 m = j * camera.world_to_camera.rotation;
    out.cov2d = m * cov3d * m.transpose() + blur * Mat2::Identity();
    out.visible = true;
    return out;
}

// --------------------------------------------------------------------------
// Forward
// --------------------------------------------------------------------------

namespace {

// Inclusive pixel-index bounds of the 3-sigma AABB; identical test is used for
// tile binning and per-pixel inclusion so results are tiling-invariant.
struct PixelBounds {
    int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
    bool empty() const { return x1 < x0 || y1 < y0; }
};

PixelBounds pixel_bounds(const ProjectedGaussian& p, int width, int height) {
    double rx = 3.0 * std::sqrt(std::max(p.cov2d(0, 0), 0.0));
    double ry = 3.0 * std::sqrt(std::max(p.cov2d(1, 1), 0.0));
    PixelBounds b;
    b.x0 = std::max(0, static_cast<int>(std::ceil(p.mean2d.x() - rx - 0.5)));
    b.x1 = std::min(width - 1, static_cast<int>(std::floor(p.mean2d.x() + rx - 0.5)));
    b.y0 = std::max(0, static_cast<int>(std::ceil(p.mean2d.y() - ry - 0.5)));
    b.y1 = std::min(height - 1, static_cast<int>(std::floor(p.mean2d.y() + ry - 0.5)));
    return b;
}

Mat2 conic_of(const Mat2& cov2d) {
    double det = cov2d(0, 0) * cov2d(1, 1) - cov2d(0, 1) * cov2d(1, 0);
    Mat2 inv;
    inv << cov2d(1, 1), -cov2d(0, 1), -cov2d(1, 0), cov2d(0, 0);
    return inv / det;
}

void check_finite(const WorldGaussians& g) {
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        if (!g.means.row(i).allFinite() || !g.rotations.row(i).allFinite() ||
            !g.scales.row(i).allFinite() || !std::isfinite(g.opacities[i]) ||
            !g.colors.row(i).allFinite())
            throw NonFiniteError("gaussian parameters", i);
    }
}

}  // namespace

RenderOutput rasterize(const WorldGaussians& gaussians, const Camera& camera,
                       const RasterizeConfig& config) {
    camera.validate();
    check_finite(gaussians);
    const Eigen::Index n = gaussians.size();
    const int w = camera.width, h = camera.height;
    const int ts = config.tile_size;

    RenderOutput out;
    out.config = config;
    out.gaussian_count = n;
    out.rgb = Image(h, w, 3);
    out.alpha = Image(h, w, 1);
    out.tiles_x = (w + ts - 1) / ts;
    out.tiles_y = (h + ts - 1) / ts;
    out.projected.resize(n);

    std::vector<Mat2> conics(n);
    std::vector<PixelBounds> bounds(n);
    parallel_for(n, config.workers, [&](std::int64_t i) {
        Mat3 cov3d = compute_cov3d(quat_from_row(gaussians.rotations, i), gaussians.scales.row(i));
        ProjectedGaussian p = project_gaussian(gaussians.means.row(i), cov3d, camera, config.blur,
                                               config.frustum_margin);
        if (p.visible) {
            bounds[i] = pixel_bounds(p, w, h);
            if (bounds[i].empty()) p.visible = false;
            conics[i] = conic_of(p.cov2d);
        }
        out.projected[i] = p;
    });

    // Tile binning (serial; per-tile lists end up ordered by gaussian index).
    out.tile_gaussians.assign(static_cast<std::size_t>(out.tiles_x) * out.tiles_y, {});
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!out.projected[i].visible) continue;
        const PixelBounds& b = bounds[i];
        for (int tyy = b.y0 / ts; tyy <= b.y1 / ts; ++tyy)
            for (int txx = b.x0 / ts; txx <= b.x1 / ts; ++txx)
                out.tile_gaussians[static_cast<std::size_t>(tyy) * out.tiles_x + txx].push_back(
                    static_cast<std::int32_t>(i));
    }
    std::int64_t tile_count = static_cast<std::int64_t>(out.tile_gaussians.size());
    parallel_for(tile_count, config.workers, [&](std::int64_t t) {
        auto& list = out.tile_gaussians[t];
        std::sort(list.begin(), list.end(), [&](std::int32_t a, std::int32_t b2) {
            double da = out.projected[a].depth, db = out.projected[b2].depth;
            return da < db || (da == db && a < b2);
        });
    });

    parallel_for(tile_count, config.workers, [&](std::int64_t t) {
        int tx = static_cast<int>(t) % out.tiles_x;
        int tyy = static_cast<int>(t) / out.tiles_x;
        int px0 = tx * ts, px1 = std::min(w, px0 + ts);
        int py0 = tyy * ts, py1 = std::min(h, py0 + ts);
        const auto& list = out.tile_gaussians[t];
        for (int py = py0; py < py1; ++py) {
            for (int px = px0; px < px1; ++px) {
                double cxp = px + 0.5, cyp = py + 0.5;
                double transmittance = 1.0;
                Vec3 color = Vec3::Zero();
                for (std::int32_t gi : list) {
                    if (transmittance < config.transmittance_min) break;
                    const PixelBounds& b = bounds[gi];
                    if (px < b.x0 || px > b.x1 || py < b.y0 || py > b.y1) continue;
                    const ProjectedGaussian& p = out.projected[gi];
                    Vec2 d(cxp - p.mean2d.x(), cyp - p.mean2d.y());
                    double power = -0.5 * d.dot(conics[gi] * d);
                    double alpha =
                        std::min(gaussians.opacities[gi] * std::exp(power), config.alpha_clamp);
                    if (alpha < config.alpha_min) continue;
                    color += (alpha * transmittance) * Vec3(gaussians.colors.row(gi));
                    transmittance *= 1.0 - alpha;
                }
                color += transmittance * config.background;
                for (int c = 0; c < 3; ++c) out.rgb.at(py, px, c) = color[c];
                out.alpha.at(py, px, 0) = 1.0 - transmittance;
            }
        }
    });
    return out;
}

// --------------------------------------------------------------------------
// Backward
// --------------------------------------------------------------------------

namespace {

struct TileAcc {
    Vec2 d_mean2d = Vec2::Zero();
    Mat2 d_conic = Mat2::Zero();
    double d_opacity = 0.0;
    Vec3 d_color = Vec3::Zero();
};

struct Contribution {
    std::int32_t local;  // index into the tile list
    double alpha;
    double transmittance;  // before this contribution
    double gaussian;       // exp(power)
    bool clamped;
};

}  // namespace

WorldGrads rasterize_backward(const WorldGaussians& gaussians, const Camera& camera,
                              const RenderOutput& aux, const Image& d_rgb,
                              const Image& d_alpha) {
    const Eigen::Index n = gaussians.size();
    if (aux.gaussian_count != n || static_cast<Eigen::Index>(aux.projected.size()) != n)
        throw ContractError("rasterize_backward aux does not match gaussian set");
    if (d_rgb.height != camera.height || d_rgb.width != camera.width || d_rgb.channels != 3)
        throw ContractError("d_rgb shape does not match camera");
    if (d_alpha.height != camera.height || d_alpha.width != camera.width || d_alpha.channels != 1)
        throw ContractError("d_alpha shape does not match camera");
    const RasterizeConfig& config = aux.config;
    const int w = camera.width, h = camera.height, ts = config.tile_size;

    std::vector<Mat2> conics(n);
    std::vector<PixelBounds> bounds(n);
    parallel_for(n, config.workers, [&](std::int64_t i) {
        if (!aux.projected[i].visible) return;
        conics[i] = conic_of(aux.projected[i].cov2d);
        bounds[i] = pixel_bounds(aux.projected[i], w, h);
    });

    const std::int64_t tile_count = static_cast<std::int64_t>(aux.tile_gaussians.size());
    std::vector<std::vector<TileAcc>> tile_accs(tile_count);

    parallel_for(tile_count, config.workers, [&](std::int64_t t) {
        const auto& list = aux.tile_gaussians[t];
        if (list.empty()) return;
        auto& accs = tile_accs[t];
        accs.assign(list.size(), TileAcc{});
        int tx = static_cast<int>(t) % aux.tiles_x;
        int tyy = static_cast<int>(t) / aux.tiles_x;
        int px0 = tx * ts, px1 = std::min(w, px0 + ts);
        int py0 = tyy * ts, py1 = std::min(h, py0 + ts);
        std::vector<Contribution> contribs;
        for (int py = py0; py < py1; ++py) {
            for (int px = px0; px < px1; ++px) {
                double cxp = px + 0.5, cyp = py + 0.5;
                contribs.clear();
                double transmittance = 1.0;
                for (std::size_t k = 0; k < list.size(); ++k) {
                    if (transmittance < config.transmittance_min) break;
                    std::int32_t gi = list[k];
                    const PixelBounds& b = bounds[gi];
                    if (px < b.x0 || px > b.x1 || py < b.y0 || py > b.y1) continue;
                    const ProjectedGaussian& p = aux.projected[gi];
                    Vec2 d(cxp - p.mean2d.x(), cyp - p.mean2d.y());
                    double power = -0.5 * d.dot(conics[gi] * d);
                    double g = std::exp(power);
                    double raw = gaussians.opacities[gi] * g;
                    double alpha = std::min(raw, config.alpha_clamp);
                    if (alpha < config.alpha_min) continue;
                    contribs.push_back({static_cast<std::int32_t>(k), alpha, transmittance, g,
                                        raw > config.alpha_clamp});
                    transmittance *= 1.0 - alpha;
                }
                const double t_final = transmittance;
                Vec3 dc(d_rgb.at(py, px, 0), d_rgb.at(py, px, 1), d_rgb.at(py, px, 2));
                double da = d_alpha.at(py, px, 0);
                if (dc.isZero(0.0) && da == 0.0) continue;

                Vec3 suffix = Vec3::Zero();  // sum of w_j * c_j for j after i
                for (auto it = contribs.rbegin(); it != contribs.rend(); ++it) {
                    std::int32_t gi = list[it->local];
                    Vec3 color = gaussians.colors.row(gi);
                    double weight = it->alpha * it->transmittance;
                    TileAcc& acc = accs[it->local];
                    acc.d_color += weight * dc;
                    double one_minus = 1.0 - it->alpha;
                    double d_alpha_i =
                        dc.dot(it->transmittance * color - suffix / one_minus -
                               config.background * (t_final / one_minus)) +
                        da * (t_final / one_minus);
                    suffix += weight * color;
                    if (it->clamped) continue;  // alpha pinned at the clamp
                    const ProjectedGaussian& p = aux.projected[gi];
                    Vec2 d(cxp - p.mean2d.x(), cyp - p.mean2d.y());
                    acc.d_opacity += it->gaussian * d_alpha_i;
                    double dg = gaussians.opacities[gi] * d_alpha_i;
                    acc.d_mean2d += dg * it->gaussian * (conics[gi] * d);
                    acc.d_conic += (-0.5 * dg * it->gaussian) * (d * d.transpose());
                }
            }
        }
    });

    WorldGrads grads;
    grads.init_zero(n);
    // Reduce tile partials in fixed tile order; deterministic for any worker count.
    std::vector<TileAcc> global(n);
    for (std::int64_t t = 0; t < tile_count; ++t) {
        const auto& list = aux.tile_gaussians[t];
        const auto& accs = tile_accs[t];
        if (accs.empty()) continue;
        for (std::size_t k = 0; k < list.size(); ++k) {
            TileAcc& g = global[list[k]];
            g.d_mean2d += accs[k].d_mean2d;
            g.d_conic += accs[k].d_conic;
            g.d_opacity += accs[k].d_opacity;
            g.d_color += accs[k].d_color;
        }
    }

    parallel_for(n, config.workers, [&](std::int64_t i) {
        const ProjectedGaussian& p = aux.projected[i];
        grads.visible[i] = p.visible ? 1 : 0;
        if (!p.visible) return;
        const TileAcc& acc = global[i];
        grads.d_opacity[i] = acc.d_opacity;
        grads.d_color.row(i) = acc.d_color;
        grads.d_mean2d.row(i) = acc.d_mean2d;

        // conic = cov2d^-1
        const Mat2& a = conics[i];
        Mat2 g_cov2d = -a.transpose() * acc.d_conic * a.transpose();

        // cov2d = M cov3d M^T + blur I, with M = J R_wc
        Quat q = quat_from_row(gaussians.rotations, i).normalized();
        Mat3 rot = q.toRotationMatrix();
        Vec3 scale = gaussians.scales.row(i);
        Mat3 d_mat = scale.array().square().matrix().asDiagonal();
        Mat3 cov3d = rot * d_mat * rot.transpose();
        Vec3 t_cam = camera.world_to_camera.apply(gaussians.means.row(i));
        double tz = t_cam.z();
        Mat23 j;
        j << camera.fx / tz, 0.0, -camera.fx * t_cam.x() / (tz * tz),
             0.0, camera.fy / tz, -camera.fy * t_cam.y() / (tz * tz);
        Mat23 m = j * camera.world_to_camera.rotation;

        Mat3 g_cov3d = m.transpose() * g_cov2d * m;
        Mat23 g_m = (g_cov2d + g_cov2d.transpose()) * m * cov3d;
        Mat23 g_j = g_m * camera.world_to_camera.rotation.transpose();

        Vec3 d_t = Vec3::Zero();
        d_t.x() += g_j(0, 2) * (-camera.fx / (tz * tz));
        d_t.y() += g_j(1, 2) * (-camera.fy / (tz * tz));
        d_t.z() += g_j(0, 0) * (-camera.fx / (tz * tz)) + g_j(1, 1) * (-camera.fy / (tz * tz)) +
                   g_j(0, 2) * (2.0 * camera.fx * t_cam.x() / (tz * tz * tz)) +
                   g_j(1, 2) * (2.0 * camera.fy * t_cam.y() / (tz * tz * tz));
        // mean2d = pinhole(t); its Jacobian wrt t is exactly j.
        d_t += j.transpose() * Vec2(acc.d_mean2d);
        grads.d_mean.row(i) = camera.world_to_camera.rotation.transpose() * d_t;

        // cov3d = R D R^T with D = diag(scale^2)
        Mat3 g_d = rot.transpose() * g_cov3d * rot;
        for (int k = 0; k < 3; ++k) grads.d_scale(i, k) = 2.0 * scale[k] * g_d(k, k);
        Mat3 g_rot = (g_cov3d + g_cov3d.transpose()) * rot * d_mat;
        grads.d_rotation_mat[i] = g_rot;

        Mat3 dr[4];
        rotation_matrix_jacobian(q, dr);
        Vec4 g_qhat;
        for (int k = 0; k < 4; ++k) g_qhat[k] = (g_rot.array() * dr[k].array()).sum();
        Vec4 q_raw(gaussians.rotations(i, 0), gaussians.rotations(i, 1), gaussians.rotations(i, 2),
                   gaussians.rotations(i, 3));
        double norm = q_raw.norm();
        Vec4 qhat(q.w(), q.x(), q.y(), q.z());
        grads.d_rotation.row(i) = (g_qhat - qhat * qhat.dot(g_qhat)) / norm;
    });
    return grads;
}

}  // namespace rigsplat
