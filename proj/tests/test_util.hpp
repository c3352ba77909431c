#pragma once

#include "rigsplat/rig_model.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace rigsplat::test {

// Unique scratch directory under the build tree; removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("rigsplat_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
};

inline double uniform(std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    return lo + (hi - lo) * ((rng() >> 11) * 0x1.0p-53);
}

inline Vec3 random_unit_vec(std::mt19937_64& rng) {
    while (true) {
        Vec3 v(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
        double n = v.norm();
        if (n > 1e-3 && n < 1.0) return v / n;
    }
}

inline Quat random_quat(std::mt19937_64& rng) {
    Vec3 axis = random_unit_vec(rng);
    double angle = uniform(rng, -M_PI, M_PI);
    return Quat(Eigen::AngleAxisd(angle, axis));
}

// Two-joint chain rig over a small tetrahedron-ish mesh; handy for FK/LBS
// tests that need full analytic control.
inline Rig make_two_bone_rig() {
    Rig rig;
    Joint root;
    root.name = "a";
    root.parent = -1;
    rig.joints.push_back(root);
    Joint child;
    child.name = "b";
    child.parent = 0;
    child.rest_translation = Vec3(1.0, 0.0, 0.0);
    rig.joints.push_back(child);

    rig.template_vertices.resize(4, 3);
    rig.template_vertices << 0.0, 0.0, 0.0,
                             1.0, 0.0, 0.0,
                             1.0, 1.0, 0.0,
                             0.5, 0.0, 1.0;
    rig.faces.resize(2, 3);
    rig.faces << 0, 1, 2,
                 0, 1, 3;
    rig.skin_weights.indices.setZero(4, SkinWeights::kMaxInfluences);
    rig.skin_weights.weights.setZero(4, SkinWeights::kMaxInfluences);
    for (int i = 0; i < 4; ++i) {
        rig.skin_weights.indices(i, 0) = 0;
        rig.skin_weights.indices(i, 1) = 1;
    }
    rig.skin_weights.weights(0, 0) = 1.0;
    rig.skin_weights.weights(1, 0) = 0.5;
    rig.skin_weights.weights(1, 1) = 0.5;
    rig.skin_weights.weights(2, 1) = 1.0;
    rig.skin_weights.weights(3, 0) = 0.25;
    rig.skin_weights.weights(3, 1) = 0.75;
    rig.validate();
    return rig;
}

}  // namespace rigsplat::test
