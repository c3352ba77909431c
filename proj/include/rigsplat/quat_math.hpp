#pragma once

#include "rigsplat/common.hpp"

#include <cmath>

namespace rigsplat {

// dR/dq for a unit quaternion (w,x,y,z), differentiating the standard
// rotation-matrix form entrywise. dr[k] is dR/dq_k.
inline void rotation_matrix_jacobian(const Quat& q, Mat3 dr[4]) {
    double w = q.w(), x = q.x(), y = q.y(), z = q.z();
    dr[0] << 0, -z, y, z, 0, -x, -y, x, 0;
    dr[1] << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
    dr[2] << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
    dr[3] << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
    for (int k = 0; k < 4; ++k) dr[k] *= 2.0;
}

// 4x4 matrix of left quaternion multiplication: L(a) q = a * q, wxyz order.
inline Eigen::Matrix4d quat_left_mult_matrix(const Quat& a) {
    Eigen::Matrix4d l;
    l << a.w(), -a.x(), -a.y(), -a.z(),
         a.x(),  a.w(), -a.z(),  a.y(),
         a.y(),  a.z(),  a.w(), -a.x(),
         a.z(), -a.y(),  a.x(),  a.w();
    return l;
}

// Quaternion exponential of a rotation vector (axis * angle).
inline Quat quat_exp(const Vec3& omega) {
    double theta = omega.norm();
    double half_sinc;  // sin(theta/2) / theta
    if (theta < 1e-8) {
        half_sinc = 0.5 - theta * theta / 48.0;
    } else {
        half_sinc = std::sin(0.5 * theta) / theta;
    }
    Vec3 v = half_sinc * omega;
    return Quat(std::cos(0.5 * theta), v.x(), v.y(), v.z());
}

// Rotation-vector log of a unit quaternion, shortest arc.
inline Vec3 quat_log(const Quat& q_in) {
    Quat q = q_in.normalized();
    if (q.w() < 0.0) q.coeffs() = -q.coeffs();
    Vec3 v(q.x(), q.y(), q.z());
    double vn = v.norm();
    if (vn < 1e-12) return 2.0 * v;
    double theta = 2.0 * std::atan2(vn, q.w());
    return (theta / vn) * v;
}

// 4x3 Jacobian of quat_exp, rows in (w,x,y,z) order.
inline Eigen::Matrix<double, 4, 3> quat_exp_jacobian(const Vec3& omega) {
    double theta = omega.norm();
    double s, ds_over_theta;  // s = sin(theta/2)/theta, ds_over_theta = s'(theta)/theta
    if (theta < 1e-6) {
        s = 0.5 - theta * theta / 48.0;
        ds_over_theta = -1.0 / 24.0;
    } else {
        s = std::sin(0.5 * theta) / theta;
        double sprime = (0.5 * std::cos(0.5 * theta) * theta - std::sin(0.5 * theta)) /
                        (theta * theta);
        ds_over_theta = sprime / theta;
    }
    Eigen::Matrix<double, 4, 3> j;
    for (int a = 0; a < 3; ++a) j(0, a) = -0.5 * s * omega[a];
    for (int i = 0; i < 3; ++i)
        for (int a = 0; a < 3; ++a)
            j(1 + i, a) = s * (i == a ? 1.0 : 0.0) + ds_over_theta * omega[i] * omega[a];
    return j;
}

}  // namespace rigsplat
