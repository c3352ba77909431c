#pragma once

#include "rigsplat/common.hpp"
#include "rigsplat/rig_model.hpp"

#include <memory>
#include <vector>

namespace rigsplat {

// Fits one rig's pose (optionally shape) to another rig's posed surface by
// gradient descent with a backtracking line search. Closest-point
// correspondences are recomputed inside every objective evaluation.

struct FitConfig {
    int max_iters = 200;
    double convergence_tol = 1e-6;  // mean vertex move per accepted step, meters
    double lambda_pose_prior = 1e-4;
    double lambda_joint_limit = 1e-2;
    double initial_step = 1.0;
    double step_shrink = 0.5;
    double step_grow = 1.5;
    double max_step = 1e4;
    double min_step = 1e-14;
    double armijo_c = 1e-4;
    bool fit_shape = false;

    void validate() const {
        if (max_iters < 0 || !(convergence_tol > 0.0) || !(initial_step > 0.0))
            throw ContractError("fit config requires positive tolerances");
    }
};

struct FitReport {
    double final_objective = 0.0;
    double mean_distance = 0.0;  // point-to-surface, meters
    double max_distance = 0.0;
    int iterations = 0;
    bool converged = false;
};

struct ClosestPoint {
    double distance = 0.0;
    Eigen::Index face = -1;
    Vec3 barycentric = Vec3::Zero();
    Vec3 point = Vec3::Zero();
};

// Exact closest point on a triangle (interior/edge/vertex cases).
ClosestPoint closest_point_on_triangle(const Vec3& query, const Vec3& a, const Vec3& b,
                                       const Vec3& c);

// Axis-aligned BVH over a triangle mesh for closest-point queries.
class TriangleMeshBvh {
public:
    TriangleMeshBvh(PointArray vertices, FaceArray faces);
    ClosestPoint closest_point(const Vec3& query) const;
    const PointArray& vertices() const { return vertices_; }
    const FaceArray& faces() const { return faces_; }

private:
    struct Node {
        Vec3 lo, hi;
        std::int32_t left = -1, right = -1;  // internal children
        std::int32_t first = 0, count = 0;   // leaf triangle range
    };
    std::int32_t build(std::int32_t first, std::int32_t count, std::vector<Vec3>& centroids);

    PointArray vertices_;
    FaceArray faces_;
    std::vector<std::int32_t> tri_order_;
    std::vector<Node> nodes_;
};

// Per-point closest surface point; parallel over points.
std::vector<ClosestPoint> point_to_surface_distance(const PointArray& points,
                                                    const TriangleMeshBvh& mesh, int workers = 1);

// Minimizes mean squared point-to-surface distance of the source rig's posed
// vertices against the target surface, plus a pose prior on joint-rotation
// log-maps and soft joint-limit hinges. Analytic gradients through skinning,
// correctives, and FK. Throws FitDivergedError on a non-finite objective.
std::pair<Pose, FitReport> fit_pose(const Rig& source_rig, const PointArray& target_vertices,
                                    const FaceArray& target_faces, const Pose& init,
                                    const FitConfig& config, Shape* shape_in_out = nullptr);

struct SequenceFit {
    std::vector<Pose> poses;
    std::vector<FitReport> reports;
};

// Fits every frame of a target rig's pose sequence, warm-starting each frame
// from the previous solution.
SequenceFit fit_sequence(const Rig& source_rig, const Rig& target_rig,
                         const std::vector<Pose>& target_poses, const FitConfig& config);

}  // namespace rigsplat
