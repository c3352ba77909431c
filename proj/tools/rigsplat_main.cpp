// rigsplat: triangle-embedded Gaussian avatar engine.
// Subcommands: synth | train | eval | render | fit-pose | ablate.
// Exit codes: 0 success, 2 validation error, 3 numeric divergence.

#include "rigsplat/blob_container.hpp"
#include "rigsplat/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <iostream>

namespace {

using namespace rigsplat;
using nlohmann::json;

// Applies --set key=value overrides onto a config JSON (dotted keys).
void apply_overrides(json& config, const std::vector<std::string>& sets) {
    for (const std::string& kv : sets) {
        auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ContractError("--set expects key=value, got: " + kv);
        std::string key = kv.substr(0, eq);
        std::string value = kv.substr(eq + 1);
        json parsed;
        try {
            parsed = json::parse(value);
        } catch (const json::parse_error&) {
            parsed = value;  // plain string
        }
        json* node = &config;
        std::size_t start = 0;
        while (true) {
            auto dot = key.find('.', start);
            std::string part = key.substr(start, dot - start);
            if (dot == std::string::npos) {
                (*node)[part] = parsed;
                break;
            }
            node = &(*node)[part];
            start = dot + 1;
        }
    }
}

TrainConfig resolve_config(const std::string& config_file, const std::vector<std::string>& sets,
                           bool paper_scale, const Dataset* dataset) {
    json base;
    if (paper_scale || dataset == nullptr)
        base = TrainConfig::paper_defaults().to_json();
    else
        base = TrainConfig::desk_preset(dataset->rig.face_count()).to_json();
    if (!config_file.empty()) {
        json from_file = json::parse(read_text_file(config_file));
        base.merge_patch(from_file);
    }
    apply_overrides(base, sets);
    return TrainConfig::from_json(base);
}

std::vector<int> split_indices(const Dataset& dataset, const std::string& split) {
    if (split == "train") return dataset.train_split;
    if (split == "test") return dataset.test_split;
    throw ContractError("unknown split: " + split);
}

int run(int argc, char** argv) {
    CLI::App app{"Triangle-embedded Gaussian avatar engine"};
    app.require_subcommand(1);

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "Generate a synthetic limb dataset");
    std::string synth_out = "dataset";
    int synth_twists = 3, synth_correctives = 3, synth_radial = 16, synth_axial = 24;
    int synth_train = 20, synth_test = 5, synth_width = 128, synth_height = 128;
    std::string synth_motion = "pronation";
    std::uint64_t synth_seed = 7;
    int synth_workers = 1;
    synth->add_option("--out", synth_out, "Output directory");
    synth->add_option("--twists", synth_twists, "Forearm twist joints");
    synth->add_option("--correctives", synth_correctives, "Twist-sine correctives");
    synth->add_option("--radial", synth_radial, "Radial mesh segments");
    synth->add_option("--axial", synth_axial, "Axial mesh segments");
    synth->add_option("--train-frames", synth_train, "Training frames");
    synth->add_option("--test-frames", synth_test, "Test frames");
    synth->add_option("--width", synth_width, "Image width");
    synth->add_option("--height", synth_height, "Image height");
    synth->add_option("--motion", synth_motion, "pronation | elbow-flex | composite");
    synth->add_option("--seed", synth_seed, "Appearance seed");
    synth->add_option("--workers", synth_workers, "Worker threads");

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "Optimize a Gaussian set against a dataset");
    std::string train_dataset, train_rig, train_out = "run", train_config, train_poses;
    std::vector<std::string> train_sets;
    bool train_paper_scale = false;
    train_cmd->add_option("--dataset", train_dataset, "Dataset directory")->required();
    train_cmd->add_option("--rig", train_rig, "Rig file (defaults to the dataset rig)");
    train_cmd->add_option("--out", train_out, "Run output directory");
    train_cmd->add_option("--config", train_config, "Config JSON file");
    train_cmd->add_option("--set", train_sets, "Override config entries (key=value)");
    train_cmd->add_option("--poses", train_poses, "Pose-override JSON");
    train_cmd->add_flag("--paper-scale", train_paper_scale,
                        "Use paper-scale constants (50k iters, 30k init, 100k cap)");

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "Compute metrics for a checkpoint");
    std::string eval_dataset, eval_rig, eval_ckpt, eval_out = "eval", eval_split = "test";
    std::string eval_config, eval_poses;
    std::vector<std::string> eval_sets;
    eval_cmd->add_option("--dataset", eval_dataset, "Dataset directory")->required();
    eval_cmd->add_option("--rig", eval_rig, "Rig file (defaults to the dataset rig)");
    eval_cmd->add_option("--checkpoint", eval_ckpt, "Gaussian checkpoint")->required();
    eval_cmd->add_option("--split", eval_split, "train | test");
    eval_cmd->add_option("--out", eval_out, "Report output directory");
    eval_cmd->add_option("--config", eval_config, "Config JSON file");
    eval_cmd->add_option("--set", eval_sets, "Override config entries");
    eval_cmd->add_option("--poses", eval_poses, "Pose-override JSON");

    // ---- render ----
    auto* render_cmd = app.add_subcommand("render", "Render checkpoint frames to PNG");
    std::string render_dataset, render_rig, render_ckpt, render_out = "renders", render_poses;
    std::string render_split = "test";
    bool render_dump = false;
    int render_workers = 1;
    render_cmd->add_option("--dataset", render_dataset, "Dataset directory (poses + cameras)")
        ->required();
    render_cmd->add_option("--rig", render_rig, "Rig file (defaults to the dataset rig)");
    render_cmd->add_option("--checkpoint", render_ckpt, "Gaussian checkpoint")->required();
    render_cmd->add_option("--split", render_split, "train | test");
    render_cmd->add_option("--out", render_out, "Output directory");
    render_cmd->add_option("--poses", render_poses, "Pose-override JSON");
    render_cmd->add_flag("--dump-float", render_dump, "Also write raw float32 dumps");
    render_cmd->add_option("--workers", render_workers, "Worker threads");

    // ---- fit-pose ----
    auto* fit_cmd = app.add_subcommand("fit-pose", "Fit a rig's poses to a dataset's surfaces");
    std::string fit_source_rig, fit_dataset, fit_out = "fit";
    int fit_max_iters = 200;
    double fit_tol = 1e-6;
    fit_cmd->add_option("--source-rig", fit_source_rig, "Rig to fit")->required();
    fit_cmd->add_option("--dataset", fit_dataset, "Dataset providing target rig + poses")
        ->required();
    fit_cmd->add_option("--out", fit_out, "Output directory");
    fit_cmd->add_option("--max-iters", fit_max_iters, "Iterations per frame");
    fit_cmd->add_option("--tol", fit_tol, "Convergence tolerance (mean vertex move, m)");

    // ---- ablate ----
    auto* ablate_cmd = app.add_subcommand("ablate", "Run the pose x rig capacity matrix");
    std::string ablate_dataset, ablate_out = "ablation", ablate_scenario = "pronation";
    std::string ablate_config;
    std::vector<std::string> ablate_sets;
    int ablate_workers = 1;
    std::uint64_t ablate_seed = 0;
    ablate_cmd->add_option("--dataset", ablate_dataset,
                           "Existing dataset directory (synthesized when omitted)");
    ablate_cmd->add_option("--out", ablate_out, "Output directory");
    ablate_cmd->add_option("--scenario", ablate_scenario, "pronation | elbow-flex | composite");
    ablate_cmd->add_option("--config", ablate_config, "Train config JSON file");
    ablate_cmd->add_option("--set", ablate_sets, "Override train config entries");
    ablate_cmd->add_option("--workers", ablate_workers, "Worker threads");
    ablate_cmd->add_option("--seed", ablate_seed, "Training seed");

    CLI11_PARSE(app, argc, argv);

    if (synth->parsed()) {
        Rig rig = make_synthetic_limb_rig(synth_twists, synth_correctives, synth_radial,
                                          synth_axial);
        GroundTruthConfig config;
        config.width = synth_width;
        config.height = synth_height;
        config.n_train = synth_train;
        config.n_test = synth_test;
        config.motion = motion_from_string(synth_motion);
        config.appearance.seed = synth_seed;
        config.workers = synth_workers;
        Dataset ds = render_ground_truth(rig, config, synth_out);
        std::cout << "dataset written to " << ds.root.string() << " (" << ds.frames.size()
                  << " frames, scene extent " << ds.scene_extent << " m)\n";
        return 0;
    }

    if (train_cmd->parsed()) {
        Dataset dataset = load_dataset(train_dataset);
        Rig rig = train_rig.empty() ? dataset.rig : load_rig(train_rig);
        TrainConfig config = resolve_config(train_config, train_sets, train_paper_scale, &dataset);
        std::vector<Pose> poses;
        const std::vector<Pose>* override_ptr = nullptr;
        if (!train_poses.empty()) {
            poses = load_pose_override(train_poses, rig.joint_count());
            override_ptr = &poses;
        }
        TrainResult result = train(dataset, rig, config, train_out, override_ptr);
        std::cout << "final train loss " << result.final_loss << ", test psnr "
                  << result.test_psnr << " dB, test ssim " << result.test_ssim << "\n"
                  << "checkpoint: " << result.checkpoint_path.string() << "\n";
        return 0;
    }

    if (eval_cmd->parsed()) {
        Dataset dataset = load_dataset(eval_dataset);
        Rig rig = eval_rig.empty() ? dataset.rig : load_rig(eval_rig);
        TrainConfig config = resolve_config(eval_config, eval_sets, false, &dataset);
        BoundGaussianSet set = load_gaussians(eval_ckpt).set;
        std::vector<Pose> poses;
        const std::vector<Pose>* override_ptr = nullptr;
        if (!eval_poses.empty()) {
            poses = load_pose_override(eval_poses, rig.joint_count());
            override_ptr = &poses;
        }
        EvalResult result =
            evaluate(dataset, rig, set, split_indices(dataset, eval_split), config, override_ptr);
        std::filesystem::create_directories(eval_out);
        write_eval_report(result, std::filesystem::path(eval_out) / "metrics.json",
                          std::filesystem::path(eval_out) / "metrics.csv");
        std::cout << "mean psnr " << result.mean_psnr << " dB, mean ssim " << result.mean_ssim
                  << " over " << result.frames.size() << " frames\n";
        return 0;
    }

    if (render_cmd->parsed()) {
        Dataset dataset = load_dataset(render_dataset);
        Rig rig = render_rig.empty() ? dataset.rig : load_rig(render_rig);
        BoundGaussianSet set = load_gaussians(render_ckpt).set;
        std::vector<Pose> poses;
        const std::vector<Pose>* override_ptr = nullptr;
        if (!render_poses.empty()) {
            poses = load_pose_override(render_poses, rig.joint_count());
            override_ptr = &poses;
        }
        std::vector<std::pair<Pose, Camera>> views;
        for (int f : split_indices(dataset, render_split)) {
            const Pose& pose = override_ptr ? (*override_ptr)[f] : dataset.frames[f].pose;
            views.emplace_back(pose, dataset.camera_for_frame(f));
        }
        TrainConfig config;
        config.workers = render_workers;
        render_frames(rig, set, views, render_out, config, render_dump);
        std::cout << "rendered " << views.size() << " frames to " << render_out << "\n";
        return 0;
    }

    if (fit_cmd->parsed()) {
        Rig source = load_rig(fit_source_rig);
        Dataset dataset = load_dataset(fit_dataset);
        FitConfig config;
        config.max_iters = fit_max_iters;
        config.convergence_tol = fit_tol;
        std::vector<Pose> targets;
        for (const FrameRecord& f : dataset.frames) targets.push_back(f.pose);
        SequenceFit fit = fit_sequence(source, dataset.rig, targets, config);
        std::filesystem::create_directories(fit_out);
        save_pose_override(fit.poses, std::filesystem::path(fit_out) / "poses.json");
        json reports = json::array();
        double mean_residual = 0.0;
        for (std::size_t i = 0; i < fit.reports.size(); ++i) {
            const FitReport& r = fit.reports[i];
            reports.push_back({{"frame", i},
                               {"final_objective", r.final_objective},
                               {"mean_distance", r.mean_distance},
                               {"max_distance", r.max_distance},
                               {"iterations", r.iterations},
                               {"converged", r.converged}});
            mean_residual += r.mean_distance;
        }
        mean_residual /= static_cast<double>(fit.reports.size());
        json report = {{"frames", reports}, {"mean_distance", mean_residual}};
        write_text_file_atomic(std::filesystem::path(fit_out) / "fit_report.json",
                               report.dump(2));
        std::cout << "fit " << fit.poses.size() << " frames, mean residual " << mean_residual
                  << " m\n";
        return 0;
    }

    if (ablate_cmd->parsed()) {
        AblateConfig config;
        config.scenario = ablate_scenario;
        std::optional<Dataset> dataset;
        if (!ablate_dataset.empty()) dataset = load_dataset(ablate_dataset);
        {
            json base;
            if (dataset)
                base = TrainConfig::desk_preset(dataset->rig.face_count()).to_json();
            else {
                Rig probe = make_synthetic_limb_rig(config.high_twists, config.high_correctives);
                base = TrainConfig::desk_preset(probe.face_count()).to_json();
            }
            if (!ablate_config.empty()) base.merge_patch(json::parse(read_text_file(ablate_config)));
            apply_overrides(base, ablate_sets);
            config.train = TrainConfig::from_json(base);
        }
        config.train.workers = ablate_workers;
        config.train.seed = ablate_seed;
        config.ground_truth.workers = ablate_workers;
        AblateResult result = ablate(config, ablate_out, dataset ? &*dataset : nullptr);
        std::cout << "cell,rig,poses,psnr,ssim\n";
        for (const AblateCell& c : result.cells)
            std::cout << c.name << "," << c.rig_kind << "," << c.pose_source << "," << c.psnr
                      << "," << c.ssim << "\n";
        std::cout << "high-vs-low (fitted poses): " << result.delta_high_vs_low_fitted
                  << " dB\ncorrective recovery: " << result.corrective_recovery * 100.0
                  << "%\noracle-vs-fitted (high rig): " << result.delta_oracle_vs_fitted_high
                  << " dB\n";
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const rigsplat::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.category() == rigsplat::Error::Category::divergence ? 3 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
