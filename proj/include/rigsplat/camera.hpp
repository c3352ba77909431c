#pragma once

#include "rigsplat/common.hpp"

namespace rigsplat {

// Pinhole camera. world_to_camera maps world points into the camera frame
// (+z forward); pixel (x, y) covers [x, x+1) x [y, y+1) with center at
// (x + 0.5, y + 0.5).
struct Camera {
    double fx = 0.0, fy = 0.0;
    double cx = 0.0, cy = 0.0;
    int width = 0, height = 0;
    Transform world_to_camera;
    double near = 0.01;
    double far = 100.0;

    void validate() const {
        if (!(fx > 0.0) || !(fy > 0.0)) throw ContractError("camera focal lengths must be > 0");
        if (width <= 0 || height <= 0) throw ContractError("camera resolution must be positive");
        if (!(near > 0.0) || !(near < far)) throw ContractError("camera requires 0 < near < far");
    }

    // Camera placed at `eye` looking at `target`, `up` approximately up.
    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx,
                          double fy, int width, int height, double near = 0.01,
                          double far = 100.0);
};

}  // namespace rigsplat
