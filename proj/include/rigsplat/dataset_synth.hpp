#pragma once

#include "rigsplat/camera.hpp"
#include "rigsplat/common.hpp"
#include "rigsplat/image.hpp"
#include "rigsplat/rig_model.hpp"

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace rigsplat {

// One training observation: image, mask, camera, pose.
struct FrameRecord {
    int index = 0;
    std::string image_path;  // relative to the dataset root
    std::string mask_path;
    std::string camera_id;
    Pose pose;  // in the dataset's reference rig's joint space
};

struct Dataset {
    std::filesystem::path root;
    std::string rig_file;  // relative manifest entry
    Rig rig;               // reference rig the stored poses belong to
    std::map<std::string, Camera> cameras;
    std::vector<FrameRecord> frames;
    std::vector<int> train_split;  // indices into frames
    std::vector<int> test_split;
    double scene_extent = 1.0;  // meters, bounding-box diagonal over posed frames

    const Camera& camera_for_frame(int frame_index) const;
    // Decoded lazily and cached; records the access for split-hygiene checks.
    const Image& image(int frame_index) const;
    const Image& mask(int frame_index) const;
    const std::set<int>& accessed_frames() const { return accessed_; }
    void validate() const;

private:
    mutable std::map<int, Image> image_cache_;
    mutable std::map<int, Image> mask_cache_;
    mutable std::set<int> accessed_;
};

Dataset load_dataset(const std::filesystem::path& dir);
void save_dataset_manifest(const Dataset& dataset);

// Synthetic arm: an elliptic cylinder with a shoulder ball joint, an elbow
// hinge, and n interpolated twist joints along the forearm with smoothly
// blended skin weights. Optional twist-sine correctives counteract the
// blend-zone pinch. Deterministic in its arguments.
Rig make_synthetic_limb_rig(int n_twist_joints, int n_correctives, int radial_segments = 16,
                            int axial_segments = 24);

enum class MotionKind { pronation, elbow_flex, composite };
MotionKind motion_from_string(const std::string& name);
std::string motion_to_string(MotionKind kind);

// Pose of a synthetic limb rig for given motion parameters. Twist is
// distributed across the rig's twist joints (or carried by the elbow when the
// rig has none), so the same motion drives rigs of different capacity.
Pose limb_pose(const Rig& rig, double pronation_rad, double elbow_flex_rad);

struct OrbitSpec {
    double radius = 1.1;        // meters from the subject center
    double elevation = 0.25;    // meters above the subject center
    double start_azimuth = 0.5; // radians
    double sweep = 4.2;         // radians over the sequence
    Vec3 center = Vec3(0.0, 0.32, 0.0);
    double focal_scale = 1.3;   // fx = fy = focal_scale * width
};

// Deterministic smooth pose trajectory with one orbiting camera per frame.
// Pronation sweeps twist 0 -> 120 degrees over the sequence.
std::vector<std::pair<Pose, Camera>> make_synthetic_sequence(const Rig& rig, MotionKind motion,
                                                             int n_frames, const OrbitSpec& orbit,
                                                             int width, int height);

// Withheld oracle Gaussian set used to synthesize ground truth: 4 per face,
// smooth procedural per-face colors from the seed, opacity 0.95.
struct OracleAppearance {
    std::uint64_t seed = 7;
    double opacity = 0.95;
};

struct GroundTruthConfig {
    int width = 128;
    int height = 128;
    int n_train = 20;
    int n_test = 5;
    MotionKind motion = MotionKind::pronation;
    OrbitSpec orbit;
    OracleAppearance appearance;
    int workers = 1;
};

// Renders the oracle set bound to `oracle_rig` through this engine's own
// forward pass; writes images, exact alpha-thresholded masks (alpha > 0.5),
// the rig, and the manifest. The oracle set itself is not part of the dataset.
Dataset render_ground_truth(const Rig& oracle_rig, const GroundTruthConfig& config,
                            const std::filesystem::path& out_dir);

}  // namespace rigsplat
