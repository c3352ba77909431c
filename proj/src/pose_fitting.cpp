#include "rigsplat/pose_fitting.hpp"

#include "rigsplat/parallel.hpp"
#include "rigsplat/quat_math.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rigsplat {

// --------------------------------------------------------------------------
// Closest point on triangle (Ericson, Real-Time Collision Detection)
// --------------------------------------------------------------------------

ClosestPoint closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b,
                                       const Vec3& c) {
    ClosestPoint out;
    Vec3 ab = b - a, ac = c - a, ap = p - a;
    double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0) {
        out.point = a;
        out.barycentric = Vec3(1, 0, 0);
    } else {
        Vec3 bp = p - b;
        double d3 = ab.dot(bp), d4 = ac.dot(bp);
        if (d3 >= 0.0 && d4 <= d3) {
            out.point = b;
            out.barycentric = Vec3(0, 1, 0);
        } else {
            double vc = d1 * d4 - d3 * d2;
            if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
                double v = d1 / (d1 - d3);
                out.point = a + v * ab;
                out.barycentric = Vec3(1.0 - v, v, 0);
            } else {
                Vec3 cp = p - c;
                double d5 = ab.dot(cp), d6 = ac.dot(cp);
                if (d6 >= 0.0 && d5 <= d6) {
                    out.point = c;
                    out.barycentric = Vec3(0, 0, 1);
                } else {
                    double vb = d5 * d2 - d1 * d6;
                    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
                        double w = d2 / (d2 - d6);
                        out.point = a + w * ac;
                        out.barycentric = Vec3(1.0 - w, 0, w);
                    } else {
                        double va = d3 * d6 - d5 * d4;
                        if (va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0) {
                            double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
                            out.point = b + w * (c - b);
                            out.barycentric = Vec3(0, 1.0 - w, w);
                        } else {
                            double denom = 1.0 / (va + vb + vc);
                            double v = vb * denom, w = vc * denom;
                            out.point = a + ab * v + ac * w;
                            out.barycentric = Vec3(1.0 - v - w, v, w);
                        }
                    }
                }
            }
        }
    }
    out.distance = (p - out.point).norm();
    return out;
}

// --------------------------------------------------------------------------
// BVH
// --------------------------------------------------------------------------

TriangleMeshBvh::TriangleMeshBvh(PointArray vertices, FaceArray faces)
    : vertices_(std::move(vertices)), faces_(std::move(faces)) {
    const auto n = static_cast<std::int32_t>(faces_.rows());
    if (n == 0) throw ContractError("BVH requires a non-empty mesh");
    tri_order_.resize(n);
    std::iota(tri_order_.begin(), tri_order_.end(), 0);
    std::vector<Vec3> centroids(n);
    for (std::int32_t f = 0; f < n; ++f)
        centroids[f] = (Vec3(vertices_.row(faces_(f, 0))) + Vec3(vertices_.row(faces_(f, 1))) +
                        Vec3(vertices_.row(faces_(f, 2)))) /
                       3.0;
    nodes_.reserve(2 * n);
    build(0, n, centroids);
}

std::int32_t TriangleMeshBvh::build(std::int32_t first, std::int32_t count,
                                    std::vector<Vec3>& centroids) {
    Node node;
    node.lo = Vec3::Constant(std::numeric_limits<double>::max());
    node.hi = Vec3::Constant(std::numeric_limits<double>::lowest());
    for (std::int32_t i = first; i < first + count; ++i) {
        std::int32_t f = tri_order_[i];
        for (int k = 0; k < 3; ++k) {
            Vec3 v = vertices_.row(faces_(f, k));
            node.lo = node.lo.cwiseMin(v);
            node.hi = node.hi.cwiseMax(v);
        }
    }
    std::int32_t index = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back(node);
    constexpr std::int32_t kLeafSize = 4;
    if (count <= kLeafSize) {
        nodes_[index].first = first;
        nodes_[index].count = count;
        return index;
    }
    Vec3 extent = node.hi - node.lo;
    int axis = 0;
    if (extent[1] > extent[0]) axis = 1;
    if (extent[2] > extent[axis]) axis = 2;
    std::int32_t mid = first + count / 2;
    std::nth_element(tri_order_.begin() + first, tri_order_.begin() + mid,
                     tri_order_.begin() + first + count,
                     [&](std::int32_t a, std::int32_t b) {
                         return centroids[a][axis] < centroids[b][axis] ||
                                (centroids[a][axis] == centroids[b][axis] && a < b);
                     });
    std::int32_t left = build(first, mid - first, centroids);
    std::int32_t right = build(mid, first + count - mid, centroids);
    nodes_[index].left = left;
    nodes_[index].right = right;
    return index;
}

namespace {

double aabb_distance_sq(const Vec3& p, const Vec3& lo, const Vec3& hi) {
    double d2 = 0.0;
    for (int k = 0; k < 3; ++k) {
        double d = std::max({lo[k] - p[k], 0.0, p[k] - hi[k]});
        d2 += d * d;
    }
    return d2;
}

}  // namespace

ClosestPoint TriangleMeshBvh::closest_point(const Vec3& query) const {
    ClosestPoint best;
    best.distance = std::numeric_limits<double>::max();
    std::vector<std::pair<double, std::int32_t>> stack;
    stack.reserve(64);
    stack.emplace_back(aabb_distance_sq(query, nodes_[0].lo, nodes_[0].hi), 0);
    while (!stack.empty()) {
        auto [dist2, ni] = stack.back();
        stack.pop_back();
        if (dist2 >= best.distance * best.distance) continue;
        const Node& node = nodes_[ni];
        if (node.left < 0) {
            for (std::int32_t i = node.first; i < node.first + node.count; ++i) {
                std::int32_t f = tri_order_[i];
                ClosestPoint cp = closest_point_on_triangle(query, vertices_.row(faces_(f, 0)),
                                                            vertices_.row(faces_(f, 1)),
                                                            vertices_.row(faces_(f, 2)));
                // Ties resolved toward the lower face id for determinism.
                if (cp.distance < best.distance ||
                    (cp.distance == best.distance && f < best.face)) {
                    best = cp;
                    best.face = f;
                }
            }
            continue;
        }
        double dl = aabb_distance_sq(query, nodes_[node.left].lo, nodes_[node.left].hi);
        double dr = aabb_distance_sq(query, nodes_[node.right].lo, nodes_[node.right].hi);
        // Push the farther child first so the nearer is explored first.
        if (dl <= dr) {
            stack.emplace_back(dr, node.right);
            stack.emplace_back(dl, node.left);
        } else {
            stack.emplace_back(dl, node.left);
            stack.emplace_back(dr, node.right);
        }
    }
    return best;
}

std::vector<ClosestPoint> point_to_surface_distance(const PointArray& points,
                                                    const TriangleMeshBvh& mesh, int workers) {
    std::vector<ClosestPoint> out(points.rows());
    parallel_for(points.rows(), workers,
                 [&](std::int64_t i) { out[i] = mesh.closest_point(points.row(i)); });
    return out;
}

// --------------------------------------------------------------------------
// Pose fitting
// --------------------------------------------------------------------------

namespace {

struct PoseParams {
    Vec3 root_translation;
    std::vector<Vec3> omegas;  // per-joint rotation vectors

    static PoseParams from_pose(const Pose& pose) {
        PoseParams p;
        p.root_translation = pose.root_translation;
        p.omegas.reserve(pose.joint_rotations.size());
        for (const Quat& q : pose.joint_rotations) p.omegas.push_back(quat_log(q));
        return p;
    }
    Pose to_pose() const {
        Pose pose;
        pose.root_translation = root_translation;
        pose.joint_rotations.reserve(omegas.size());
        for (const Vec3& w : omegas) pose.joint_rotations.push_back(quat_exp(w));
        return pose;
    }
    VecX flatten() const {
        VecX v(3 + 3 * omegas.size());
        v.head<3>() = root_translation;
        for (std::size_t j = 0; j < omegas.size(); ++j) v.segment<3>(3 + 3 * j) = omegas[j];
        return v;
    }
    static PoseParams unflatten(const VecX& v, int joints) {
        PoseParams p;
        p.root_translation = v.head<3>();
        p.omegas.resize(joints);
        for (int j = 0; j < joints; ++j) p.omegas[j] = v.segment<3>(3 + 3 * j);
        return p;
    }
};

struct Objective {
    const Rig& rig;
    const TriangleMeshBvh& target;
    const FitConfig& config;
    const Shape& base_shape;
    int joints;

    Eigen::Index param_count() const {
        return 3 + 3 * joints + (config.fit_shape ? rig.shape_count() : 0);
    }
    Shape shape_of(const VecX& params) const {
        if (!config.fit_shape) return base_shape;
        Shape s;
        s.coefficients = params.tail(rig.shape_count());
        return s;
    }

    struct Eval {
        double value = 0.0;
        double mean_distance = 0.0;
        double max_distance = 0.0;
        PointArray vertices;
    };

    Eval evaluate(const VecX& params) const {
        PoseParams pp = PoseParams::unflatten(params, joints);
        Pose pose = pp.to_pose();
        Eval ev;
        ev.vertices = skin_vertices(rig, pose, shape_of(params));
        double sum_sq = 0.0, sum = 0.0, max_d = 0.0;
        for (Eigen::Index i = 0; i < ev.vertices.rows(); ++i) {
            ClosestPoint cp = target.closest_point(ev.vertices.row(i));
            sum_sq += cp.distance * cp.distance;
            sum += cp.distance;
            max_d = std::max(max_d, cp.distance);
        }
        const double np = static_cast<double>(ev.vertices.rows());
        ev.value = sum_sq / np + prior_value(pp);
        ev.mean_distance = sum / np;
        ev.max_distance = max_d;
        return ev;
    }

    double prior_value(const PoseParams& pp) const {
        double prior = 0.0, limits = 0.0;
        for (int j = 0; j < joints; ++j) {
            const Vec3& w = pp.omegas[j];
            prior += w.squaredNorm();
            Vec3 axis = rig.twist_axis(j);
            double twist = w.dot(axis);
            double swing = (w - twist * axis).norm();
            double ht = std::max(0.0, std::abs(twist) - rig.joints[j].max_twist);
            double hs = std::max(0.0, swing - rig.joints[j].max_swing);
            limits += ht * ht + hs * hs;
        }
        return config.lambda_pose_prior * prior + config.lambda_joint_limit * limits;
    }

    // Full evaluation with the analytic gradient. Correspondences are held
    // fixed for the gradient (exact a.e. for point-to-surface distance).
    Eval evaluate_with_gradient(const VecX& params, VecX& grad) const {
        PoseParams pp = PoseParams::unflatten(params, joints);
        Pose pose = pp.to_pose();
        Shape shape = shape_of(params);
        std::vector<Transform> world = forward_kinematics(rig, pose);
        std::vector<Transform> rest = rest_transforms(rig);
        PointArray shaped = shaped_vertices(rig, shape);
        if (rig.corrective_count() > 0) shaped += corrective_offsets(rig, pose);

        std::vector<Transform> skinning(world.size());
        for (std::size_t j = 0; j < world.size(); ++j)
            skinning[j] = world[j] * rest[j].inverse();

        const Eigen::Index n_verts = rig.vertex_count();
        Eval ev;
        ev.vertices.resize(n_verts, 3);
        for (Eigen::Index i = 0; i < n_verts; ++i) {
            Vec3 acc = Vec3::Zero();
            Vec3 v = shaped.row(i);
            for (int k = 0; k < SkinWeights::kMaxInfluences; ++k) {
                double wgt = rig.skin_weights.weights(i, k);
                if (wgt == 0.0) continue;
                acc += wgt * skinning[rig.skin_weights.indices(i, k)].apply(v);
            }
            ev.vertices.row(i) = acc;
        }

        // Data term and per-vertex gradient.
        const double np = static_cast<double>(n_verts);
        PointArray d_verts(n_verts, 3);
        double sum_sq = 0.0, sum = 0.0, max_d = 0.0;
        for (Eigen::Index i = 0; i < n_verts; ++i) {
            ClosestPoint cp = target.closest_point(ev.vertices.row(i));
            Vec3 diff = Vec3(ev.vertices.row(i)) - cp.point;
            d_verts.row(i) = (2.0 / np) * diff;
            sum_sq += cp.distance * cp.distance;
            sum += cp.distance;
            max_d = std::max(max_d, cp.distance);
        }
        ev.value = sum_sq / np + prior_value(pp);
        ev.mean_distance = sum / np;
        ev.max_distance = max_d;

        grad = VecX::Zero(params.size());

        // Root translation moves every vertex by the identity.
        Vec3 g_t = Vec3::Zero();
        for (Eigen::Index i = 0; i < n_verts; ++i) g_t += Vec3(d_verts.row(i));
        grad.head<3>() = g_t;

        // Per joint: G_k = sum_i d_verts_i * u_i^k, with u_i^k the
        // world[k]^-1-mapped subtree LBS contribution of vertex i.
        std::vector<int> parent(joints);
        for (int j = 0; j < joints; ++j) parent[j] = rig.joints[j].parent;

        // z[i][k]: subtree-weighted posed contributions, w[i][k]: subtree weight.
        std::vector<PointArray> z(joints, PointArray::Zero(n_verts, 3));
        std::vector<VecX> wsum(joints, VecX::Zero(n_verts));
        for (Eigen::Index i = 0; i < n_verts; ++i) {
            Vec3 v = shaped.row(i);
            for (int k = 0; k < SkinWeights::kMaxInfluences; ++k) {
                double wgt = rig.skin_weights.weights(i, k);
                if (wgt == 0.0) continue;
                int j = static_cast<int>(rig.skin_weights.indices(i, k));
                Vec3 contrib = wgt * skinning[j].apply(v);
                for (int anc = j; anc != -1; anc = parent[anc]) {
                    z[anc].row(i) += contrib;
                    wsum[anc][i] += wgt;
                }
            }
        }

        for (int k = 0; k < joints; ++k) {
            // Accumulate G_k over vertices influenced by k's subtree.
            Mat3 g_k = Mat3::Zero();
            Transform winv = world[k].inverse();
            bool any = false;
            for (Eigen::Index i = 0; i < n_verts; ++i) {
                double wk = wsum[k][i];
                if (wk == 0.0) continue;
                any = true;
                Vec3 u = winv.rotation * Vec3(z[k].row(i)) + wk * winv.translation;
                g_k += Vec3(d_verts.row(i)) * u.transpose();
            }

            // Q_k,alpha = (P_k L_k).rotation * dR_k,alpha, with dR through the
            // quaternion exponential.
            Quat qk = quat_exp(pp.omegas[k]);
            Mat3 parent_rot =
                (parent[k] >= 0 ? world[parent[k]].rotation : Mat3::Identity()) *
                rig.joints[k].rest_rotation.toRotationMatrix();
            Mat3 drdq[4];
            rotation_matrix_jacobian(qk, drdq);
            Eigen::Matrix<double, 4, 3> dqdw = quat_exp_jacobian(pp.omegas[k]);

            Vec3 g_omega = Vec3::Zero();
            if (any) {
                for (int a = 0; a < 3; ++a) {
                    Mat3 dr = drdq[0] * dqdw(0, a) + drdq[1] * dqdw(1, a) +
                              drdq[2] * dqdw(2, a) + drdq[3] * dqdw(3, a);
                    g_omega[a] = ((parent_rot * dr).array() * g_k.array()).sum();
                }
            }

            // Corrective features driven by this joint.
            for (const Corrective& cor : rig.correctives) {
                if (cor.driver.joint_index != k) continue;
                // Blended displacement response: sum_i d_verts_i . (LBS_lin d_c,i)
                double response = 0.0;
                for (Eigen::Index i = 0; i < n_verts; ++i) {
                    Vec3 d = cor.displacement.row(i);
                    if (d.isZero(0.0)) continue;
                    Vec3 blended = Vec3::Zero();
                    for (int kk = 0; kk < SkinWeights::kMaxInfluences; ++kk) {
                        double wgt = rig.skin_weights.weights(i, kk);
                        if (wgt == 0.0) continue;
                        blended += wgt * (skinning[rig.skin_weights.indices(i, kk)].rotation * d);
                    }
                    response += Vec3(d_verts.row(i)).dot(blended);
                }
                Vec4 dfdq;
                if (cor.driver.kind == CorrectiveDriver::Kind::rotation_residual) {
                    int r = cor.driver.component_index / 3, cc = cor.driver.component_index % 3;
                    for (int m = 0; m < 4; ++m) dfdq[m] = drdq[m](r, cc);
                } else {
                    Vec3 axis = rig.twist_axis(k);
                    double w = qk.w();
                    double u = Vec3(qk.x(), qk.y(), qk.z()).dot(axis);
                    double denom = w * w + u * u;
                    double dfdw = 0.0, dfdu = 0.0;
                    if (denom > 1e-24) {
                        dfdw = 2.0 * u * (u * u - w * w) / (denom * denom);
                        dfdu = 2.0 * w * (w * w - u * u) / (denom * denom);
                    }
                    dfdq[0] = dfdw;
                    dfdq.tail<3>() = dfdu * axis;
                }
                g_omega += response * (dfdq.transpose() * dqdw).transpose();
            }

            // Pose prior and joint-limit hinges.
            const Vec3& w_vec = pp.omegas[k];
            g_omega += 2.0 * config.lambda_pose_prior * w_vec;
            Vec3 axis = rig.twist_axis(k);
            double twist = w_vec.dot(axis);
            Vec3 swing_vec = w_vec - twist * axis;
            double swing = swing_vec.norm();
            double ht = std::max(0.0, std::abs(twist) - rig.joints[k].max_twist);
            if (ht > 0.0)
                g_omega += config.lambda_joint_limit * 2.0 * ht * (twist > 0 ? 1.0 : -1.0) * axis;
            double hs = std::max(0.0, swing - rig.joints[k].max_swing);
            if (hs > 0.0 && swing > 1e-12)
                g_omega += config.lambda_joint_limit * 2.0 * hs * swing_vec / swing;

            grad.segment<3>(3 + 3 * k) = g_omega;
        }

        if (config.fit_shape) {
            for (int s = 0; s < rig.shape_count(); ++s) {
                double g_beta = 0.0;
                for (Eigen::Index i = 0; i < n_verts; ++i) {
                    Vec3 basis = rig.shape_basis[s].row(i);
                    Vec3 blended = Vec3::Zero();
                    for (int kk = 0; kk < SkinWeights::kMaxInfluences; ++kk) {
                        double wgt = rig.skin_weights.weights(i, kk);
                        if (wgt == 0.0) continue;
                        blended +=
                            wgt * (skinning[rig.skin_weights.indices(i, kk)].rotation * basis);
                    }
                    g_beta += Vec3(d_verts.row(i)).dot(blended);
                }
                grad[3 + 3 * joints + s] = g_beta;
            }
        }
        return ev;
    }
};

}  // namespace

std::pair<Pose, FitReport> fit_pose(const Rig& source_rig, const PointArray& target_vertices,
                                    const FaceArray& target_faces, const Pose& init,
                                    const FitConfig& config, Shape* shape_in_out) {
    config.validate();
    validate_pose(source_rig, init);
    Shape shape = shape_in_out ? *shape_in_out : Shape::zeros(source_rig.shape_count());
    validate_shape(source_rig, shape);
    if (config.fit_shape && !shape_in_out)
        throw ContractError("fit_shape requires a shape to optimize");

    TriangleMeshBvh target(target_vertices, target_faces);
    Objective objective{source_rig, target, config, shape, source_rig.joint_count()};

    VecX params(objective.param_count());
    params.head(3 + 3 * source_rig.joint_count()) = PoseParams::from_pose(init).flatten();
    if (config.fit_shape) params.tail(source_rig.shape_count()) = shape.coefficients;
    VecX grad;
    Objective::Eval ev = objective.evaluate_with_gradient(params, grad);
    if (!std::isfinite(ev.value)) throw FitDivergedError(0, "initial objective is non-finite");

    FitReport report;
    double step = config.initial_step;
    PointArray prev_vertices = ev.vertices;
    for (int iter = 1; iter <= config.max_iters; ++iter) {
        report.iterations = iter;
        double gnorm2 = grad.squaredNorm();
        if (gnorm2 < 1e-24) {
            report.converged = true;
            break;
        }
        bool accepted = false;
        VecX cand;
        Objective::Eval cand_ev;
        while (step >= config.min_step) {
            cand = params - step * grad;
            cand_ev = objective.evaluate(cand);
            if (!std::isfinite(cand_ev.value))
                throw FitDivergedError(iter, "objective became non-finite during line search");
            if (cand_ev.value <= ev.value - config.armijo_c * step * gnorm2) {
                accepted = true;
                break;
            }
            step *= config.step_shrink;
        }
        if (!accepted) {
            report.converged = true;  // no descent step exists at this resolution
            break;
        }
        double mean_move = (cand_ev.vertices - prev_vertices).rowwise().norm().mean();
        prev_vertices = cand_ev.vertices;
        params = cand;
        ev = objective.evaluate_with_gradient(params, grad);
        step = std::min(step * config.step_grow, config.max_step);
        if (mean_move < config.convergence_tol) {
            report.converged = true;
            break;
        }
    }

    report.final_objective = ev.value;
    report.mean_distance = ev.mean_distance;
    report.max_distance = ev.max_distance;
    Pose result = PoseParams::unflatten(params, source_rig.joint_count()).to_pose();
    if (shape_in_out) *shape_in_out = objective.shape_of(params);
    return {result, report};
}

SequenceFit fit_sequence(const Rig& source_rig, const Rig& target_rig,
                         const std::vector<Pose>& target_poses, const FitConfig& config) {
    SequenceFit out;
    out.poses.reserve(target_poses.size());
    out.reports.reserve(target_poses.size());
    Shape target_shape = Shape::zeros(target_rig.shape_count());
    Pose init = Pose::rest(source_rig.joint_count());
    for (const Pose& target_pose : target_poses) {
        PointArray target_verts = skin_vertices(target_rig, target_pose, target_shape);
        auto [pose, report] = fit_pose(source_rig, target_verts, target_rig.faces, init, config);
        init = pose;  // warm start
        out.poses.push_back(std::move(pose));
        out.reports.push_back(report);
    }
    return out;
}

}  // namespace rigsplat
