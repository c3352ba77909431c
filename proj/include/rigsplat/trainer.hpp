#pragma once

#include "rigsplat/dataset_synth.hpp"
#include "rigsplat/losses_metrics.hpp"
#include "rigsplat/optimization.hpp"
#include "rigsplat/pose_fitting.hpp"
#include "rigsplat/rasterizer.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace rigsplat {

inline constexpr const char* kEngineVersion = "rigsplat 0.1.0";

struct TrainConfig {
    std::int64_t total_iters = 50000;
    Eigen::Index init_gaussians = 30000;
    DensifyConfig densify;
    LossWeights loss_weights;
    PerGroupLr lr;
    std::uint64_t seed = 0;
    std::int64_t checkpoint_cadence = 5000;  // densify interval x 10
    Vec3 background = Vec3::Zero();
    int workers = 1;
    int tile_size = 16;
    double split_scale_fraction = 0.01;  // of scene extent
    bool eval_crop_to_mask = false;      // PSNR on the mask bounding box instead of full frame

    // Paper-scale constants (50k iters, 30k init, 100k cap) are the defaults.
    static TrainConfig paper_defaults() { return {}; }
    // Desk-scale preset: 2k iters, Gaussian budget proportional to face count.
    static TrainConfig desk_preset(Eigen::Index face_count);

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    std::uint64_t config_hash() const;
    void validate() const;
};

struct TrainResult {
    std::filesystem::path run_dir;
    std::filesystem::path checkpoint_path;
    BoundGaussianSet final_set;
    double final_loss = 0.0;
    double test_psnr = 0.0;
    double test_ssim = 0.0;
};

// Full optimization loop: sample frame -> skin -> bind -> rasterize -> loss ->
// backward -> Adam -> density control. Deterministic given (config, dataset,
// rig, override) for any worker count. Writes checkpoints, a JSON-lines
// training log, and a run manifest into out_dir.
TrainResult train(const Dataset& dataset, const Rig& rig, const TrainConfig& config,
                  const std::filesystem::path& out_dir,
                  const std::vector<Pose>* pose_override = nullptr);

struct EvalFrame {
    int index = 0;
    double psnr = 0.0;
    double ssim = 0.0;
    std::optional<double> lpips;
};

struct EvalResult {
    std::vector<EvalFrame> frames;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    std::optional<double> mean_lpips;
};

EvalResult evaluate(const Dataset& dataset, const Rig& rig, const BoundGaussianSet& set,
                    const std::vector<int>& frame_indices, const TrainConfig& config,
                    const std::vector<Pose>* pose_override = nullptr);
void write_eval_report(const EvalResult& result, const std::filesystem::path& json_path,
                       const std::filesystem::path& csv_path);

// Renders each (pose, camera) pair to 8-bit PNG; optional raw float32 dumps.
void render_frames(const Rig& rig, const BoundGaussianSet& set,
                   const std::vector<std::pair<Pose, Camera>>& views,
                   const std::filesystem::path& out_dir, const TrainConfig& config,
                   bool dump_float32 = false);

// Pose-override JSON: {"frames": [{"index": i, "pose": [...]}, ...]}.
void save_pose_override(const std::vector<Pose>& poses, const std::filesystem::path& path);
std::vector<Pose> load_pose_override(const std::filesystem::path& path, int expected_joints);

struct AblateCell {
    std::string name;
    std::string rig_kind;    // "high" | "low" | "low+corr"
    std::string pose_source; // "oracle" | "fitted" | "derived"
    double psnr = 0.0;
    double ssim = 0.0;
    std::uint64_t config_hash = 0;
};

struct AblateConfig {
    std::string scenario = "pronation";
    TrainConfig train;
    FitConfig fit;
    GroundTruthConfig ground_truth;  // used when no dataset dir is supplied
    int high_twists = 3;
    int high_correctives = 3;
};

struct AblateResult {
    std::vector<AblateCell> cells;
    double delta_high_vs_low_fitted = 0.0;   // PSNR, identical fitted-pose protocol
    double corrective_recovery = 0.0;        // fraction of that gap recovered
    double delta_oracle_vs_fitted_high = 0.0;
};

// Runs the pose-quality x rig-capacity matrix under one shared TrainConfig;
// asserts the per-cell config hashes match and emits a CSV + JSON table.
AblateResult ablate(const AblateConfig& config, const std::filesystem::path& out_dir,
                    const Dataset* existing_dataset = nullptr);

}  // namespace rigsplat
