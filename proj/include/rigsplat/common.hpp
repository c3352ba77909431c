#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

namespace rigsplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Quat = Eigen::Quaterniond;
using VecX = Eigen::VectorXd;

// Row-major dynamic arrays; matches the on-disk row-major blob layout.
using PointArray = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using QuatArray = Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor>;  // w,x,y,z
using FaceArray = Eigen::Matrix<std::uint32_t, Eigen::Dynamic, 3, Eigen::RowMajor>;

// --------------------------------------------------------------------------
// Errors
// --------------------------------------------------------------------------

// Base for all engine errors. `validation` errors map to CLI exit code 2,
// `divergence` errors to exit code 3.
class Error : public std::runtime_error {
public:
    enum class Category { validation, divergence, io };
    Error(Category cat, const std::string& msg) : std::runtime_error(msg), category_(cat) {}
    Category category() const { return category_; }

private:
    Category category_;
};

class PoseShapeError : public Error {
public:
    explicit PoseShapeError(const std::string& msg) : Error(Category::validation, msg) {}
};

class RigFormatError : public Error {
public:
    RigFormatError(const std::string& field, const std::string& msg)
        : Error(Category::validation, "rig format error [" + field + "]: " + msg), field_(field) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

class DegenerateTriangleError : public Error {
public:
    explicit DegenerateTriangleError(std::int64_t face_id)
        : Error(Category::validation, "degenerate triangle (face " + std::to_string(face_id) + ")"),
          face_id_(face_id) {}
    std::int64_t face_id() const { return face_id_; }

private:
    std::int64_t face_id_;
};

class InitError : public Error {
public:
    explicit InitError(const std::string& msg) : Error(Category::validation, msg) {}
};

class NonFiniteError : public Error {
public:
    NonFiniteError(const std::string& what_param, std::int64_t index)
        : Error(Category::divergence,
                "non-finite value in " + what_param + " (index " + std::to_string(index) + ")"),
          index_(index) {}
    explicit NonFiniteError(const std::string& what_param)
        : Error(Category::divergence, "non-finite value in " + what_param), index_(-1) {}
    std::int64_t index() const { return index_; }

private:
    std::int64_t index_;
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(Category::validation, msg) {}
};

class DatasetError : public Error {
public:
    explicit DatasetError(const std::string& msg) : Error(Category::validation, msg) {}
};

class FitDivergedError : public Error {
public:
    FitDivergedError(int iteration, const std::string& msg)
        : Error(Category::divergence,
                "pose fit diverged at iteration " + std::to_string(iteration) + ": " + msg),
          iteration_(iteration) {}
    int iteration() const { return iteration_; }

private:
    int iteration_;
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(Category::io, msg) {}
};

// --------------------------------------------------------------------------
// Rigid transform (rotation + translation)
// --------------------------------------------------------------------------

struct Transform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static Transform identity() { return {}; }

    Transform operator*(const Transform& rhs) const {
        return {rotation * rhs.rotation, rotation * rhs.translation + translation};
    }

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

    Transform inverse() const {
        Mat3 rt = rotation.transpose();
        return {rt, -(rt * translation)};
    }
};

// --------------------------------------------------------------------------
// Small numeric helpers
// --------------------------------------------------------------------------

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// 64-bit FNV-1a, used for blob checksums and config hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 14695981039346656037ull) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
    return fnv1a64(bytes.data(), bytes.size());
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Quaternion as (w,x,y,z) row in a QuatArray.
inline Quat quat_from_row(const QuatArray& a, Eigen::Index i) {
    return Quat(a(i, 0), a(i, 1), a(i, 2), a(i, 3));
}

inline void quat_to_row(const Quat& q, QuatArray& a, Eigen::Index i) {
    a(i, 0) = q.w();
    a(i, 1) = q.x();
    a(i, 2) = q.y();
    a(i, 3) = q.z();
}

// Deterministic splittable RNG seed derivation.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace rigsplat
