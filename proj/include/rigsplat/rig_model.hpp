#pragma once

#include "rigsplat/common.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace rigsplat {

// Parametric skinned body model: template mesh + skeleton + skin weights +
// shape blendshapes + pose-driven correctives. Maps (pose, shape) to posed
// vertices via forward kinematics and linear blend skinning. Immutable after
// load; all operations are pure functions and thread-safe.

struct Joint {
    std::string name;
    int parent = -1;  // -1 for roots
    Quat rest_rotation = Quat::Identity();
    Vec3 rest_translation = Vec3::Zero();
    // Soft fitting limits (radians); permissive by default.
    double max_swing = 3.1;
    double max_twist = 3.1;
};

struct CorrectiveDriver {
    enum class Kind { rotation_residual, twist_sine };
    Kind kind = Kind::rotation_residual;
    int joint_index = 0;
    int component_index = 0;  // entry of flattened (R - I), row-major; unused for twist_sine
};

struct Corrective {
    CorrectiveDriver driver;
    PointArray displacement;  // V x 3, meters per unit driver feature
};

struct SkinWeights {
    static constexpr int kMaxInfluences = 8;
    // Fixed-width sparse rows, zero-padded: weight 0 entries are inert.
    Eigen::Matrix<std::uint32_t, Eigen::Dynamic, kMaxInfluences, Eigen::RowMajor> indices;
    Eigen::Matrix<double, Eigen::Dynamic, kMaxInfluences, Eigen::RowMajor> weights;

    Eigen::Index rows() const { return weights.rows(); }
};

struct Rig {
    PointArray template_vertices;  // V x 3, meters
    FaceArray faces;               // F x 3
    std::vector<Joint> joints;
    SkinWeights skin_weights;
    std::vector<PointArray> shape_basis;  // S fields of V x 3
    std::vector<Corrective> correctives;  // C entries

    Eigen::Index vertex_count() const { return template_vertices.rows(); }
    Eigen::Index face_count() const { return faces.rows(); }
    int joint_count() const { return static_cast<int>(joints.size()); }
    int shape_count() const { return static_cast<int>(shape_basis.size()); }
    int corrective_count() const { return static_cast<int>(correctives.size()); }

    // Joint evaluation order with parents before children; built by validate().
    const std::vector<int>& topo_order() const { return topo_order_; }
    // Twist axis in the joint's local frame: rest-pose direction toward the
    // first child, or +y for leaf joints.
    Vec3 twist_axis(int joint_index) const;

    // Checks every structural invariant; throws RigFormatError naming the
    // offending field. Must be called after construction or load.
    void validate();

private:
    std::vector<int> topo_order_;
};

struct Pose {
    Vec3 root_translation = Vec3::Zero();
    std::vector<Quat> joint_rotations;  // local, relative to rest; unit

    static Pose rest(int joint_count) {
        Pose p;
        p.joint_rotations.assign(joint_count, Quat::Identity());
        return p;
    }
};

struct Shape {
    VecX coefficients;

    static Shape zeros(int count) {
        Shape s;
        s.coefficients = VecX::Zero(count);
        return s;
    }
};

// Swing-twist decomposition of q about unit axis: q = swing * twist, with the
// twist a rotation about `axis`. Returns {swing, twist}.
std::pair<Quat, Quat> swing_twist(const Quat& q, const Vec3& axis);
// sin of the twist angle about `axis`; smooth in q, 0 at identity.
double twist_sine(const Quat& q, const Vec3& axis);

// World transform per joint: T_j = T_parent * rest_local_j * R(pose.q_j),
// with roots additionally translated by pose.root_translation.
std::vector<Transform> forward_kinematics(const Rig& rig, const Pose& pose);
// Accumulated rest transforms (identity pose, zero root translation).
std::vector<Transform> rest_transforms(const Rig& rig);

// Template + shape blendshapes.
PointArray shaped_vertices(const Rig& rig, const Shape& shape);
// Pose-driven corrective displacement field (zero at rest).
PointArray corrective_offsets(const Rig& rig, const Pose& pose);
// Full forward pass: LBS of (shaped + correctives) with FK transforms.
PointArray skin_vertices(const Rig& rig, const Pose& pose, const Shape& shape);

// Validates pose dimension and quaternion norms (degenerate quaternions are an
// error, never silently normalized).
void validate_pose(const Rig& rig, const Pose& pose);
void validate_shape(const Rig& rig, const Shape& shape);

// Rig file format: <path>.rigjson manifest + <path>.rigbin float32/uint32
// blobs. Round-trips bit-exactly. `path` should carry the .rigjson extension.
void save_rig(const Rig& rig, const std::filesystem::path& path);
Rig load_rig(const std::filesystem::path& path);

// Pose <-> flat array [tx,ty,tz, q0w,q0x,q0y,q0z, ...] used in JSON manifests.
std::vector<double> pose_to_flat(const Pose& pose);
Pose pose_from_flat(const std::vector<double>& flat);

}  // namespace rigsplat
