#include "rigsplat/trainer.hpp"

#include "rigsplat/blob_container.hpp"
#include "rigsplat/parallel.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <random>

namespace rigsplat {

using nlohmann::json;

// --------------------------------------------------------------------------
// TrainConfig
// --------------------------------------------------------------------------

TrainConfig TrainConfig::desk_preset(Eigen::Index face_count) {
    TrainConfig c;
    c.total_iters = 2000;
    c.init_gaussians = 4 * face_count;
    c.densify.max_gaussians = 16 * face_count;
    c.checkpoint_cadence = c.densify.interval * 10;
    return c;
}

void TrainConfig::validate() const {
    if (total_iters < 0) throw ContractError("total_iters must be >= 0");
    if (init_gaussians <= 0) throw ContractError("init_gaussians must be > 0");
    if (checkpoint_cadence <= 0) throw ContractError("checkpoint_cadence must be > 0");
    if (workers < 1) throw ContractError("workers must be >= 1");
    densify.validate(init_gaussians);
    loss_weights.validate();
}

json TrainConfig::to_json() const {
    json j;
    j["total_iters"] = total_iters;
    j["init_gaussians"] = init_gaussians;
    j["densify"] = {{"interval", densify.interval},
                    {"grad_threshold", densify.grad_threshold},
                    {"split_scale_threshold", densify.split_scale_threshold},
                    {"prune_opacity_threshold", densify.prune_opacity_threshold},
                    {"max_gaussians", densify.max_gaussians},
                    {"split_factor", densify.split_factor},
                    {"children", densify.children}};
    j["loss_weights"] = {{"w_l1", loss_weights.w_l1},
                         {"w_ssim", loss_weights.w_ssim},
                         {"w_mask", loss_weights.w_mask}};
    j["lr"] = {{"position", lr.position},
               {"rotation", lr.rotation},
               {"log_scale", lr.log_scale},
               {"opacity", lr.opacity},
               {"color", lr.color}};
    j["seed"] = seed;
    j["checkpoint_cadence"] = checkpoint_cadence;
    j["background"] = {background.x(), background.y(), background.z()};
    j["workers"] = workers;
    j["tile_size"] = tile_size;
    j["split_scale_fraction"] = split_scale_fraction;
    j["eval_crop_to_mask"] = eval_crop_to_mask;
    return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.total_iters = j.value("total_iters", c.total_iters);
    c.init_gaussians = j.value("init_gaussians", c.init_gaussians);
    if (j.contains("densify")) {
        const json& d = j.at("densify");
        c.densify.interval = d.value("interval", c.densify.interval);
        c.densify.grad_threshold = d.value("grad_threshold", c.densify.grad_threshold);
        c.densify.split_scale_threshold =
            d.value("split_scale_threshold", c.densify.split_scale_threshold);
        c.densify.prune_opacity_threshold =
            d.value("prune_opacity_threshold", c.densify.prune_opacity_threshold);
        c.densify.max_gaussians = d.value("max_gaussians", c.densify.max_gaussians);
        c.densify.split_factor = d.value("split_factor", c.densify.split_factor);
        c.densify.children = d.value("children", c.densify.children);
    }
    if (j.contains("loss_weights")) {
        const json& w = j.at("loss_weights");
        c.loss_weights.w_l1 = w.value("w_l1", c.loss_weights.w_l1);
        c.loss_weights.w_ssim = w.value("w_ssim", c.loss_weights.w_ssim);
        c.loss_weights.w_mask = w.value("w_mask", c.loss_weights.w_mask);
    }
    if (j.contains("lr")) {
        const json& l = j.at("lr");
        c.lr.position = l.value("position", c.lr.position);
        c.lr.rotation = l.value("rotation", c.lr.rotation);
        c.lr.log_scale = l.value("log_scale", c.lr.log_scale);
        c.lr.opacity = l.value("opacity", c.lr.opacity);
        c.lr.color = l.value("color", c.lr.color);
    }
    c.seed = j.value("seed", c.seed);
    c.checkpoint_cadence = j.value("checkpoint_cadence", c.checkpoint_cadence);
    if (j.contains("background")) {
        auto b = j.at("background").get<std::vector<double>>();
        if (b.size() != 3) throw ContractError("background must have 3 components");
        c.background = Vec3(b[0], b[1], b[2]);
    }
    c.workers = j.value("workers", c.workers);
    c.tile_size = j.value("tile_size", c.tile_size);
    c.split_scale_fraction = j.value("split_scale_fraction", c.split_scale_fraction);
    c.eval_crop_to_mask = j.value("eval_crop_to_mask", c.eval_crop_to_mask);
    return c;
}

std::uint64_t TrainConfig::config_hash() const { return fnv1a64(to_json().dump()); }

// --------------------------------------------------------------------------
// Training loop
// --------------------------------------------------------------------------

namespace {

void fisher_yates_shuffle(std::vector<int>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(
            (static_cast<unsigned __int128>(rng()) * i) >> 64);
        std::swap(v[i - 1], v[j]);
    }
}

Image premasked(const Image& img, const Image& mask) {
    Image out = img;
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
            double m = mask.at(y, x, 0) >= 0.5 ? 1.0 : 0.0;
            for (int c = 0; c < out.channels; ++c) out.at(y, x, c) *= m;
        }
    return out;
}

const Pose& frame_pose(const Dataset& dataset, int frame_index,
                       const std::vector<Pose>* pose_override) {
    if (pose_override) {
        if (frame_index < 0 || frame_index >= static_cast<int>(pose_override->size()))
            throw ContractError("pose override does not cover frame " +
                                std::to_string(frame_index));
        return (*pose_override)[frame_index];
    }
    return dataset.frames.at(frame_index).pose;
}

struct FrameCache {
    std::vector<std::optional<PointArray>> vertices;
    std::vector<std::optional<std::vector<TriangleFrame>>> tri_frames;
    std::vector<std::optional<Image>> gt;    // premasked
    std::vector<std::optional<Image>> mask;

    explicit FrameCache(std::size_t n) : vertices(n), tri_frames(n), gt(n), mask(n) {}
};

}  // namespace

TrainResult train(const Dataset& dataset, const Rig& rig, const TrainConfig& config_in,
                  const std::filesystem::path& out_dir,
                  const std::vector<Pose>* pose_override) {
    TrainConfig config = config_in;
    config.densify.split_scale_threshold = config.split_scale_fraction * dataset.scene_extent;
    config.validate();
    dataset.validate();
    if (pose_override)
        for (const Pose& p : *pose_override) validate_pose(rig, p);

    const auto wall_start = std::chrono::steady_clock::now();
    std::filesystem::create_directories(out_dir);
    save_rig(rig, out_dir / "rig_used.rigjson");

    Shape shape = Shape::zeros(rig.shape_count());
    FrameCache cache(dataset.frames.size());
    auto frame_data = [&](int f) {
        if (!cache.vertices[f]) {
            cache.vertices[f] = skin_vertices(rig, frame_pose(dataset, f, pose_override), shape);
            cache.tri_frames[f] = compute_triangle_frames(*cache.vertices[f], rig.faces);
            cache.mask[f] = dataset.mask(f);
            cache.gt[f] = premasked(dataset.image(f), *cache.mask[f]);
        }
    };

    // Init on the first training frame's posed vertices.
    frame_data(dataset.train_split.front());
    BoundGaussianSet set = init_gaussians(rig.faces, *cache.vertices[dataset.train_split.front()],
                                          config.init_gaussians, config.seed);
    SplatAdam adam;
    adam.init(set.size());
    DensityStats stats;
    stats.init(set.size());

    RasterizeConfig raster_config;
    raster_config.tile_size = config.tile_size;
    raster_config.background = config.background;
    raster_config.workers = config.workers;

    std::ofstream log(out_dir / "training_log.jsonl", std::ios::trunc);
    if (!log) throw IoError("cannot open training log in " + out_dir.string());

    std::vector<int> schedule = dataset.train_split;
    std::int64_t epoch = -1;
    double last_loss = 0.0;
    for (std::int64_t iter = 0; iter < config.total_iters; ++iter) {
        std::size_t pos = static_cast<std::size_t>(iter) % schedule.size();
        if (pos == 0) {
            ++epoch;
            std::mt19937_64 shuffle_rng(mix_seed(config.seed, 0x5u + epoch));
            fisher_yates_shuffle(schedule, shuffle_rng);
        }
        int f = schedule[pos];
        frame_data(f);
        const Camera& camera = dataset.camera_for_frame(f);

        WorldGaussians world = bind_all(set, *cache.tri_frames[f]);
        RenderOutput render = rasterize(world, camera, raster_config);
        TotalLoss loss =
            total_loss(render.rgb, render.alpha, *cache.gt[f], *cache.mask[f], config.loss_weights);
        last_loss = loss.value;

        WorldGrads world_grads =
            rasterize_backward(world, camera, render, loss.d_pred, loss.d_alpha);
        BindGrads local_grads =
            bind_backward(set, rig.faces, *cache.vertices[f], *cache.tri_frames[f], world_grads);
        adam.step(set, local_grads, config.lr, dataset.scene_extent, iter, config.total_iters);
        accumulate_density_stats(stats, world_grads, world, camera.width, camera.height);

        double lr_now = lr_schedule(config.lr.position * dataset.scene_extent, iter,
                                    config.total_iters);
        if ((iter + 1) % config.densify.interval == 0 && iter + 1 < config.total_iters) {
            std::mt19937_64 densify_rng(mix_seed(config.seed, 0xDE000000u + iter));
            DensifyReport report =
                densify_and_prune(set, adam, stats, config.densify, iter + 1, densify_rng);
            log << json({{"iter", iter + 1},
                         {"event", "densify"},
                         {"count", report.count_after},
                         {"split", report.split},
                         {"cloned", report.cloned},
                         {"pruned", report.pruned},
                         {"loss", last_loss},
                         {"lr", lr_now}})
                       .dump()
                << "\n";
        } else if ((iter + 1) % 100 == 0 || iter + 1 == config.total_iters) {
            log << json({{"iter", iter + 1},
                         {"count", set.size()},
                         {"loss", last_loss},
                         {"lr", lr_now}})
                       .dump()
                << "\n";
        }
        if ((iter + 1) % config.checkpoint_cadence == 0 && iter + 1 < config.total_iters) {
            char name[48];
            std::snprintf(name, sizeof(name), "ckpt_%06lld.ckptjson",
                          static_cast<long long>(iter + 1));
            save_gaussians(set, out_dir / name, iter + 1, config.seed);
        }
    }
    log.flush();

    // Split hygiene: the loop above must never have touched test frames.
    for (int t : dataset.test_split)
        if (dataset.accessed_frames().count(t))
            throw ContractError("training read test-split frame " + std::to_string(t));

    TrainResult result;
    result.run_dir = out_dir;
    result.checkpoint_path = out_dir / "ckpt_final.ckptjson";
    save_gaussians(set, result.checkpoint_path, config.total_iters, config.seed);
    result.final_loss = last_loss;

    // Held-out metrics, computed only after the loop has finished.
    EvalResult eval_result =
        evaluate(dataset, rig, set, dataset.test_split, config, pose_override);
    result.test_psnr = eval_result.mean_psnr;
    result.test_ssim = eval_result.mean_ssim;

    const double wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
    json manifest;
    manifest["engine"] = kEngineVersion;
    manifest["config"] = config.to_json();
    manifest["config_hash"] = config.config_hash();
    manifest["rig_checksum"] = file_checksum(out_dir / "rig_used.rigbin");
    manifest["dataset"] = dataset.root.string();
    manifest["dataset_checksum"] = file_checksum(dataset.root / "manifest.json");
    manifest["pose_override"] = pose_override != nullptr;
    manifest["wall_clock_seconds"] = wall_seconds;
    manifest["final_metrics"] = {{"train_loss", result.final_loss},
                                 {"test_psnr", result.test_psnr},
                                 {"test_ssim", result.test_ssim}};
    manifest["final_gaussians"] = set.size();
    write_text_file_atomic(out_dir / "run_manifest.json", manifest.dump(2));

    result.final_set = std::move(set);
    return result;
}

// --------------------------------------------------------------------------
// Eval / render
// --------------------------------------------------------------------------

namespace {

// PSNR restricted to the mask bounding box (config flag).
double psnr_mask_crop(const Image& pred, const Image& gt, const Image& mask) {
    int x0 = mask.width, x1 = -1, y0 = mask.height, y1 = -1;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(y, x, 0) >= 0.5) {
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
            }
    if (x1 < x0) return psnr(pred, gt);
    Image pc(y1 - y0 + 1, x1 - x0 + 1, pred.channels);
    Image gc(y1 - y0 + 1, x1 - x0 + 1, pred.channels);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            for (int c = 0; c < pred.channels; ++c) {
                pc.at(y - y0, x - x0, c) = pred.at(y, x, c);
                gc.at(y - y0, x - x0, c) = gt.at(y, x, c);
            }
    return psnr(pc, gc);
}

}  // namespace

EvalResult evaluate(const Dataset& dataset, const Rig& rig, const BoundGaussianSet& set,
                    const std::vector<int>& frame_indices, const TrainConfig& config,
                    const std::vector<Pose>* pose_override) {
    RasterizeConfig raster_config;
    raster_config.tile_size = config.tile_size;
    raster_config.background = config.background;
    raster_config.workers = config.workers;
    Shape shape = Shape::zeros(rig.shape_count());

    EvalResult result;
    const PerceptualMetricFn* lpips = lpips_provider();
    for (int f : frame_indices) {
        PointArray verts = skin_vertices(rig, frame_pose(dataset, f, pose_override), shape);
        WorldGaussians world = bind_all(set, verts, rig.faces);
        RenderOutput render = rasterize(world, dataset.camera_for_frame(f), raster_config);
        Image gt = premasked(dataset.image(f), dataset.mask(f));
        EvalFrame ef;
        ef.index = f;
        ef.psnr = config.eval_crop_to_mask ? psnr_mask_crop(render.rgb, gt, dataset.mask(f))
                                           : psnr(render.rgb, gt);
        ef.ssim = ssim(render.rgb, gt).value;
        if (lpips) ef.lpips = (*lpips)(render.rgb, gt);
        result.frames.push_back(ef);
    }
    if (!result.frames.empty()) {
        double psum = 0.0, ssum = 0.0, lsum = 0.0;
        for (const EvalFrame& ef : result.frames) {
            psum += ef.psnr;
            ssum += ef.ssim;
            if (ef.lpips) lsum += *ef.lpips;
        }
        result.mean_psnr = psum / result.frames.size();
        result.mean_ssim = ssum / result.frames.size();
        if (lpips) result.mean_lpips = lsum / result.frames.size();
    }
    return result;
}

void write_eval_report(const EvalResult& result, const std::filesystem::path& json_path,
                       const std::filesystem::path& csv_path) {
    json j;
    json frames = json::array();
    for (const EvalFrame& f : result.frames) {
        json e = {{"index", f.index}, {"psnr", f.psnr}, {"ssim", f.ssim}};
        if (f.lpips) e["lpips"] = *f.lpips;
        frames.push_back(e);
    }
    j["frames"] = frames;
    j["mean_psnr"] = result.mean_psnr;
    j["mean_ssim"] = result.mean_ssim;
    if (result.mean_lpips) j["mean_lpips"] = *result.mean_lpips;
    write_text_file_atomic(json_path, j.dump(2));

    std::string csv = result.mean_lpips ? "frame,psnr,ssim,lpips\n" : "frame,psnr,ssim\n";
    for (const EvalFrame& f : result.frames) {
        csv += std::to_string(f.index) + "," + std::to_string(f.psnr) + "," +
               std::to_string(f.ssim);
        if (f.lpips) csv += "," + std::to_string(*f.lpips);
        csv += "\n";
    }
    csv += result.mean_lpips
               ? "mean," + std::to_string(result.mean_psnr) + "," +
                     std::to_string(result.mean_ssim) + "," + std::to_string(*result.mean_lpips) +
                     "\n"
               : "mean," + std::to_string(result.mean_psnr) + "," +
                     std::to_string(result.mean_ssim) + "\n";
    write_text_file_atomic(csv_path, csv);
}

void render_frames(const Rig& rig, const BoundGaussianSet& set,
                   const std::vector<std::pair<Pose, Camera>>& views,
                   const std::filesystem::path& out_dir, const TrainConfig& config,
                   bool dump_float32) {
    std::filesystem::create_directories(out_dir);
    RasterizeConfig raster_config;
    raster_config.tile_size = config.tile_size;
    raster_config.background = config.background;
    raster_config.workers = 1;
    Shape shape = Shape::zeros(rig.shape_count());
    parallel_for(static_cast<std::int64_t>(views.size()), config.workers, [&](std::int64_t i) {
        const auto& [pose, camera] = views[i];
        PointArray verts = skin_vertices(rig, pose, shape);
        WorldGaussians world = bind_all(set, verts, rig.faces);
        RenderOutput render = rasterize(world, camera, raster_config);
        char name[32];
        std::snprintf(name, sizeof(name), "%06lld", static_cast<long long>(i));
        write_png(out_dir / (std::string(name) + ".png"), render.rgb);
        write_png_gray16(out_dir / (std::string(name) + "_alpha.png"), render.alpha);
        if (dump_float32)
            write_raw_f32(out_dir / (std::string(name) + ".f32"), render.rgb);
    });
}

// --------------------------------------------------------------------------
// Pose override IO
// --------------------------------------------------------------------------

void save_pose_override(const std::vector<Pose>& poses, const std::filesystem::path& path) {
    json j;
    j["version"] = 1;
    json frames = json::array();
    for (std::size_t i = 0; i < poses.size(); ++i)
        frames.push_back({{"index", i}, {"pose", pose_to_flat(poses[i])}});
    j["frames"] = frames;
    write_text_file_atomic(path, j.dump(2));
}

std::vector<Pose> load_pose_override(const std::filesystem::path& path, int expected_joints) {
    json j = json::parse(read_text_file(path));
    const json& frames = j.at("frames");
    std::vector<Pose> poses(frames.size());
    for (const json& f : frames) {
        std::size_t idx = f.at("index").get<std::size_t>();
        if (idx >= poses.size()) throw ContractError("pose override has out-of-range index");
        poses[idx] = pose_from_flat(f.at("pose").get<std::vector<double>>());
        if (static_cast<int>(poses[idx].joint_rotations.size()) != expected_joints)
            throw PoseShapeError("pose override frame " + std::to_string(idx) +
                                 " has wrong joint count");
    }
    return poses;
}

// --------------------------------------------------------------------------
// Ablation matrix
// --------------------------------------------------------------------------

AblateResult ablate(const AblateConfig& config, const std::filesystem::path& out_dir,
                    const Dataset* existing_dataset) {
    std::filesystem::create_directories(out_dir);

    Rig high_rig = make_synthetic_limb_rig(config.high_twists, config.high_correctives);
    std::optional<Dataset> synthesized;
    const Dataset* dataset = existing_dataset;
    if (!dataset) {
        GroundTruthConfig gt = config.ground_truth;
        gt.motion = motion_from_string(config.scenario);
        synthesized = render_ground_truth(high_rig, gt, out_dir / "dataset");
        dataset = &*synthesized;
    }
    if (dataset->rig.joint_count() != high_rig.joint_count())
        throw ContractError("ablate: dataset rig does not match the high-capacity rig");

    Rig low_rig = make_synthetic_limb_rig(0, 0);
    Rig low_corr_rig = make_synthetic_limb_rig(0, 1);

    std::vector<Pose> oracle_poses;
    for (const FrameRecord& f : dataset->frames) oracle_poses.push_back(f.pose);

    // Fitted poses: each source rig is fit to the high-capacity rig's posed
    // surfaces, warm-started across the frame sequence.
    auto fit_for = [&](const Rig& source, const std::string& name) {
        SequenceFit fit = fit_sequence(source, dataset->rig, oracle_poses, config.fit);
        save_pose_override(fit.poses, out_dir / ("poses_" + name + ".json"));
        return fit.poses;
    };
    std::vector<Pose> high_fitted = fit_for(high_rig, "high_fitted");
    std::vector<Pose> low_fitted = fit_for(low_rig, "low_fitted");
    std::vector<Pose> low_corr_fitted = fit_for(low_corr_rig, "low_corr_fitted");

    // Oracle-derived poses: the same analytic motion distributed onto the
    // low-capacity rig's joints.
    auto derived_sequence =
        make_synthetic_sequence(low_rig, motion_from_string(config.scenario),
                                static_cast<int>(dataset->frames.size()), config.ground_truth.orbit,
                                config.ground_truth.width, config.ground_truth.height);
    std::vector<Pose> low_derived;
    for (auto& [pose, cam] : derived_sequence) low_derived.push_back(pose);

    struct CellSpec {
        std::string name;
        const Rig* rig;
        std::string rig_kind;
        const std::vector<Pose>* poses;  // nullptr = dataset (oracle) poses
        std::string pose_source;
    };
    std::vector<CellSpec> specs = {
        {"high_oracle", &high_rig, "high", nullptr, "oracle"},
        {"high_fitted", &high_rig, "high", &high_fitted, "fitted"},
        {"low_fitted", &low_rig, "low", &low_fitted, "fitted"},
        {"low_corr_fitted", &low_corr_rig, "low+corr", &low_corr_fitted, "fitted"},
        {"low_derived", &low_rig, "low", &low_derived, "derived"},
    };

    AblateResult result;
    std::uint64_t expected_hash = config.train.config_hash();
    for (const CellSpec& spec : specs) {
        // The only variable across cells is the rig/pose source; the training
        // configuration is shared and hash-checked.
        if (config.train.config_hash() != expected_hash)
            throw ContractError("ablate: training config drifted between cells");
        TrainResult tr = train(*dataset, *spec.rig, config.train, out_dir / spec.name, spec.poses);
        AblateCell cell;
        cell.name = spec.name;
        cell.rig_kind = spec.rig_kind;
        cell.pose_source = spec.pose_source;
        cell.psnr = tr.test_psnr;
        cell.ssim = tr.test_ssim;
        cell.config_hash = expected_hash;
        result.cells.push_back(cell);
    }

    auto cell_psnr = [&](const std::string& name) {
        for (const AblateCell& c : result.cells)
            if (c.name == name) return c.psnr;
        throw ContractError("ablate: missing cell " + name);
    };
    result.delta_high_vs_low_fitted = cell_psnr("high_fitted") - cell_psnr("low_fitted");
    result.delta_oracle_vs_fitted_high = cell_psnr("high_oracle") - cell_psnr("high_fitted");
    double gap = result.delta_high_vs_low_fitted;
    result.corrective_recovery =
        gap != 0.0 ? (cell_psnr("low_corr_fitted") - cell_psnr("low_fitted")) / gap : 0.0;

    json j;
    json cells = json::array();
    for (const AblateCell& c : result.cells)
        cells.push_back({{"name", c.name},
                         {"rig", c.rig_kind},
                         {"poses", c.pose_source},
                         {"psnr", c.psnr},
                         {"ssim", c.ssim},
                         {"config_hash", c.config_hash}});
    j["cells"] = cells;
    j["delta_high_vs_low_fitted_psnr"] = result.delta_high_vs_low_fitted;
    j["delta_oracle_vs_fitted_high_psnr"] = result.delta_oracle_vs_fitted_high;
    j["corrective_recovery_fraction"] = result.corrective_recovery;
    write_text_file_atomic(out_dir / "ablation.json", j.dump(2));

    std::string csv = "cell,rig,poses,psnr,ssim\n";
    for (const AblateCell& c : result.cells)
        csv += c.name + "," + c.rig_kind + "," + c.pose_source + "," + std::to_string(c.psnr) +
               "," + std::to_string(c.ssim) + "\n";
    write_text_file_atomic(out_dir / "ablation.csv", csv);
    return result;
}

}  // namespace rigsplat
