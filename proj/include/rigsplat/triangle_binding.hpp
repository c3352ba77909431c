#pragma once

#include "rigsplat/common.hpp"

#include <filesystem>
#include <vector>

namespace rigsplat {

// Gaussians live in per-triangle local frames and are mapped rigidly to world
// space from posed vertices. No learned deformation: the frame is a pure
// function of the triangle's vertices.

struct TriangleFrame {
    Mat3 rotation = Mat3::Identity();  // columns: tangent (v1-v0), normal x tangent, normal
    Vec3 origin = Vec3::Zero();        // centroid
    double scale = 1.0;                // sqrt(triangle area)
};

// Column 1 = normalize(v1-v0), column 3 = unit normal, column 2 = col3 x col1.
// Throws DegenerateTriangleError (with face_id) when area <= 1e-12 m^2.
TriangleFrame triangle_frame(const Vec3& v0, const Vec3& v1, const Vec3& v2,
                             std::int64_t face_id = -1);

std::vector<TriangleFrame> compute_triangle_frames(const PointArray& vertices,
                                                   const FaceArray& faces);

// Single Gaussian in its parent triangle's frame. Raw parameters are
// unconstrained; activations happen at bind time (normalize for rotation, exp
// for scale, sigmoid for opacity and color).
struct BoundGaussian {
    std::uint32_t triangle_index = 0;
    Vec3 local_position = Vec3::Zero();   // triangle-scale units
    Quat local_rotation = Quat::Identity();
    Vec3 local_log_scale = Vec3::Zero();  // log of triangle-scale units
    double opacity_logit = 0.0;
    Vec3 color_raw = Vec3::Zero();
};

struct WorldGaussian {
    Vec3 mean = Vec3::Zero();
    Quat rotation = Quat::Identity();
    Vec3 scale = Vec3::Ones();
    double opacity = 1.0;
    Vec3 color = Vec3::Zero();
};

// Structure-of-arrays Gaussian set; all arrays share length N.
struct BoundGaussianSet {
    std::vector<std::uint32_t> triangle_index;
    PointArray local_position;
    QuatArray local_rotation;  // w,x,y,z; raw, normalized at bind
    PointArray local_log_scale;
    VecX opacity_logit;
    PointArray color_raw;

    Eigen::Index size() const { return static_cast<Eigen::Index>(triangle_index.size()); }
    void resize(Eigen::Index n);
    BoundGaussian get(Eigen::Index i) const;
    void set(Eigen::Index i, const BoundGaussian& g);
    void validate() const;  // parallel-array length consistency
};

struct WorldGaussians {
    PointArray means;
    QuatArray rotations;  // unit, w,x,y,z
    PointArray scales;
    VecX opacities;
    PointArray colors;

    Eigen::Index size() const { return means.rows(); }
    WorldGaussian get(Eigen::Index i) const;
};

// Exactly one Gaussian per face plus n_total - F extras on uniformly drawn
// faces (seeded). Defaults: centered, identity rotation, isotropic scale 0.5
// triangle units, opacity 0.1, mid-gray color.
BoundGaussianSet init_gaussians(const FaceArray& faces, const PointArray& posed_vertices,
                                Eigen::Index n_total, std::uint64_t seed);

WorldGaussian local_to_world(const BoundGaussian& g, const TriangleFrame& frame);

// Frames computed once per face per call; O(F + N).
WorldGaussians bind_all(const BoundGaussianSet& set, const PointArray& posed_vertices,
                        const FaceArray& faces);
WorldGaussians bind_all(const BoundGaussianSet& set, const std::vector<TriangleFrame>& frames);

// Gradients w.r.t. world-space Gaussian parameters, as produced by the
// rasterizer backward pass. d_rotation_mat is the same rotation gradient in
// matrix form; the binding backward consumes it for the frame chain.
struct WorldGrads {
    PointArray d_mean;
    QuatArray d_rotation;
    std::vector<Mat3> d_rotation_mat;
    PointArray d_scale;
    VecX d_opacity;
    PointArray d_color;
    // Screen-space positional gradients and visibility, for density control.
    Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor> d_mean2d;
    std::vector<std::uint8_t> visible;

    void init_zero(Eigen::Index n);
};

struct BindGrads {
    PointArray d_position;
    QuatArray d_rotation;
    PointArray d_log_scale;
    VecX d_opacity_logit;
    PointArray d_color;
    PointArray d_vertices;  // V x 3; filled only when requested, else 0 x 3
};

// Chains world-parameter gradients into the local (optimizable) parameters,
// and optionally into the posed vertices through the frame construction.
// `posed_vertices` is only read when with_vertex_grads is set.
BindGrads bind_backward(const BoundGaussianSet& set, const FaceArray& faces,
                        const PointArray& posed_vertices,
                        const std::vector<TriangleFrame>& frames, const WorldGrads& grads,
                        bool with_vertex_grads = false);

// Checkpoint container: JSON header {count, iteration, seed} + float32 blobs
// per field (same container as the rig format).
void save_gaussians(const BoundGaussianSet& set, const std::filesystem::path& path,
                    std::int64_t iteration, std::uint64_t seed);
struct LoadedGaussians {
    BoundGaussianSet set;
    std::int64_t iteration = 0;
    std::uint64_t seed = 0;
};
LoadedGaussians load_gaussians(const std::filesystem::path& path);

}  // namespace rigsplat
