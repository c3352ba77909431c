#include "rigsplat/dataset_synth.hpp"

#include "rigsplat/blob_container.hpp"
#include "rigsplat/parallel.hpp"
#include "rigsplat/rasterizer.hpp"
#include "rigsplat/triangle_binding.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <random>

namespace rigsplat {

using nlohmann::json;

// --------------------------------------------------------------------------
// Dataset access
// --------------------------------------------------------------------------

const Camera& Dataset::camera_for_frame(int frame_index) const {
    const FrameRecord& f = frames.at(frame_index);
    auto it = cameras.find(f.camera_id);
    if (it == cameras.end())
        throw DatasetError("frame " + std::to_string(frame_index) + " references unknown camera " +
                           f.camera_id);
    return it->second;
}

const Image& Dataset::image(int frame_index) const {
    accessed_.insert(frame_index);
    auto it = image_cache_.find(frame_index);
    if (it != image_cache_.end()) return it->second;
    const FrameRecord& f = frames.at(frame_index);
    return image_cache_.emplace(frame_index, read_png(root / f.image_path)).first->second;
}

const Image& Dataset::mask(int frame_index) const {
    accessed_.insert(frame_index);
    auto it = mask_cache_.find(frame_index);
    if (it != mask_cache_.end()) return it->second;
    const FrameRecord& f = frames.at(frame_index);
    return mask_cache_.emplace(frame_index, read_png(root / f.mask_path)).first->second;
}

void Dataset::validate() const {
    if (train_split.empty()) throw DatasetError("train split is empty");
    for (const FrameRecord& f : frames) {
        if (!std::filesystem::exists(root / f.image_path))
            throw DatasetError("frame " + std::to_string(f.index) + ": missing image file " +
                               f.image_path);
        if (!std::filesystem::exists(root / f.mask_path))
            throw DatasetError("frame " + std::to_string(f.index) + ": missing mask file " +
                               f.mask_path);
        if (cameras.find(f.camera_id) == cameras.end())
            throw DatasetError("frame " + std::to_string(f.index) + ": unknown camera " +
                               f.camera_id);
        if (static_cast<int>(f.pose.joint_rotations.size()) != rig.joint_count())
            throw DatasetError("frame " + std::to_string(f.index) +
                               ": pose dimension does not match the dataset rig");
    }
    auto check_split = [&](const std::vector<int>& split, const char* name) {
        for (int idx : split)
            if (idx < 0 || idx >= static_cast<int>(frames.size()))
                throw DatasetError(std::string(name) + " split references missing frame " +
                                   std::to_string(idx));
    };
    check_split(train_split, "train");
    check_split(test_split, "test");
}

// --------------------------------------------------------------------------
// Manifest IO
// --------------------------------------------------------------------------

namespace {

json camera_to_json(const std::string& id, const Camera& cam) {
    std::vector<double> w2c(16, 0.0);
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) w2c[r * 4 + c] = cam.world_to_camera.rotation(r, c);
        w2c[r * 4 + 3] = cam.world_to_camera.translation[r];
    }
    w2c[15] = 1.0;
    return {{"id", id},         {"fx", cam.fx},       {"fy", cam.fy},
            {"cx", cam.cx},     {"cy", cam.cy},       {"width", cam.width},
            {"height", cam.height}, {"near", cam.near}, {"far", cam.far},
            {"world_to_camera", w2c}};
}

Camera camera_from_json(const json& j) {
    Camera cam;
    cam.fx = j.at("fx").get<double>();
    cam.fy = j.at("fy").get<double>();
    cam.cx = j.at("cx").get<double>();
    cam.cy = j.at("cy").get<double>();
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    cam.near = j.at("near").get<double>();
    cam.far = j.at("far").get<double>();
    auto w2c = j.at("world_to_camera").get<std::vector<double>>();
    if (w2c.size() != 16) throw DatasetError("world_to_camera must have 16 entries");
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) cam.world_to_camera.rotation(r, c) = w2c[r * 4 + c];
        cam.world_to_camera.translation[r] = w2c[r * 4 + 3];
    }
    cam.validate();
    return cam;
}

}  // namespace

void save_dataset_manifest(const Dataset& dataset) {
    json manifest;
    manifest["version"] = 1;
    manifest["rig"] = dataset.rig_file;
    manifest["scene_extent"] = dataset.scene_extent;
    json cams = json::array();
    for (const auto& [id, cam] : dataset.cameras) cams.push_back(camera_to_json(id, cam));
    manifest["cameras"] = cams;
    json frames = json::array();
    for (const FrameRecord& f : dataset.frames) {
        frames.push_back({{"index", f.index},
                          {"image", f.image_path},
                          {"mask", f.mask_path},
                          {"camera", f.camera_id},
                          {"pose", pose_to_flat(f.pose)}});
    }
    manifest["frames"] = frames;
    manifest["split"] = {{"train", dataset.train_split}, {"test", dataset.test_split}};
    write_text_file_atomic(dataset.root / "manifest.json", manifest.dump(2));
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::filesystem::path manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path))
        throw DatasetError("no manifest.json in " + dir.string());
    json manifest;
    try {
        manifest = json::parse(read_text_file(manifest_path));
    } catch (const json::parse_error& e) {
        throw DatasetError(std::string("manifest parse failure: ") + e.what());
    }
    try {
        Dataset ds;
        ds.root = dir;
        ds.rig_file = manifest.at("rig").get<std::string>();
        ds.rig = load_rig(dir / ds.rig_file);
        ds.scene_extent = manifest.at("scene_extent").get<double>();
        for (const json& cj : manifest.at("cameras"))
            ds.cameras.emplace(cj.at("id").get<std::string>(), camera_from_json(cj));
        for (const json& fj : manifest.at("frames")) {
            FrameRecord f;
            f.index = fj.at("index").get<int>();
            f.image_path = fj.at("image").get<std::string>();
            f.mask_path = fj.at("mask").get<std::string>();
            f.camera_id = fj.at("camera").get<std::string>();
            f.pose = pose_from_flat(fj.at("pose").get<std::vector<double>>());
            ds.frames.push_back(std::move(f));
        }
        ds.train_split = manifest.at("split").at("train").get<std::vector<int>>();
        ds.test_split = manifest.at("split").at("test").get<std::vector<int>>();
        ds.validate();
        return ds;
    } catch (const json::exception& e) {
        throw DatasetError(std::string("manifest missing field: ") + e.what());
    }
}

// --------------------------------------------------------------------------
// Synthetic limb rig
// --------------------------------------------------------------------------

namespace {

constexpr double kUpperArmLength = 0.3;  // meters, shoulder to elbow
constexpr double kForearmLength = 0.3;   // meters, elbow to wrist end
constexpr double kRadiusX = 0.055;       // elliptic cross-section: makes axial
constexpr double kRadiusZ = 0.045;       // rotation observable for fitting
constexpr double kBendBand = 0.03;       // shoulder->elbow blend half-width

double smoothstep(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

double snap_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// Blend stations along the arm: (height, joint) pairs; weights ramp smoothly
// between consecutive stations.
struct Station {
    double y;
    int joint;
};

}  // namespace

Rig make_synthetic_limb_rig(int n_twist_joints, int n_correctives, int radial_segments,
                            int axial_segments) {
    if (radial_segments < 3 || axial_segments < 2)
        throw ContractError("limb rig needs radial_segments >= 3 and axial_segments >= 2");
    if (n_twist_joints < 0 || n_correctives < 0)
        throw ContractError("twist joint and corrective counts must be >= 0");

    const double total_length = kUpperArmLength + kForearmLength;
    const int rings = axial_segments + 1;

    Rig rig;

    // Joints: root -> shoulder -> elbow -> twist_1 .. twist_n.
    Joint root;
    root.name = "root";
    root.parent = -1;
    rig.joints.push_back(root);
    Joint shoulder;
    shoulder.name = "shoulder";
    shoulder.parent = 0;
    rig.joints.push_back(shoulder);
    Joint elbow;
    elbow.name = "elbow";
    elbow.parent = 1;
    elbow.rest_translation = Vec3(0.0, kUpperArmLength, 0.0);
    rig.joints.push_back(elbow);
    for (int k = 1; k <= n_twist_joints; ++k) {
        Joint twist;
        twist.name = "twist_" + std::to_string(k);
        twist.parent = 1 + k;  // elbow for k=1, previous twist otherwise
        twist.rest_translation = Vec3(0.0, kForearmLength / n_twist_joints, 0.0);
        rig.joints.push_back(twist);
    }
    const int shoulder_j = 1, elbow_j = 2;

    // Mesh: elliptic cylinder with two cap centers.
    const Eigen::Index v_count = static_cast<Eigen::Index>(rings) * radial_segments + 2;
    rig.template_vertices.resize(v_count, 3);
    for (int i = 0; i < rings; ++i) {
        double y = total_length * i / axial_segments;
        for (int j = 0; j < radial_segments; ++j) {
            double theta = 2.0 * M_PI * j / radial_segments;
            Eigen::Index idx = static_cast<Eigen::Index>(i) * radial_segments + j;
            rig.template_vertices(idx, 0) = snap_f32(kRadiusX * std::cos(theta));
            rig.template_vertices(idx, 1) = snap_f32(y);
            rig.template_vertices(idx, 2) = snap_f32(kRadiusZ * std::sin(theta));
        }
    }
    const Eigen::Index bottom_center = v_count - 2;
    const Eigen::Index top_center = v_count - 1;
    rig.template_vertices.row(bottom_center) << 0.0, 0.0, 0.0;
    rig.template_vertices.row(top_center) << 0.0, snap_f32(total_length), 0.0;

    const Eigen::Index f_count =
        static_cast<Eigen::Index>(axial_segments) * radial_segments * 2 + 2 * radial_segments;
    rig.faces.resize(f_count, 3);
    Eigen::Index fi = 0;
    auto ring_idx = [&](int i, int j) {
        return static_cast<std::uint32_t>(i * radial_segments + ((j % radial_segments)));
    };
    for (int i = 0; i < axial_segments; ++i) {
        for (int j = 0; j < radial_segments; ++j) {
            std::uint32_t a = ring_idx(i, j), b = ring_idx(i + 1, j);
            std::uint32_t c = ring_idx(i + 1, j + 1), d = ring_idx(i, j + 1);
            rig.faces.row(fi++) << a, b, c;
            rig.faces.row(fi++) << a, c, d;
        }
    }
    for (int j = 0; j < radial_segments; ++j) {
        rig.faces.row(fi++) << static_cast<std::uint32_t>(bottom_center), ring_idx(0, j + 1),
            ring_idx(0, j);
        rig.faces.row(fi++) << static_cast<std::uint32_t>(top_center),
            ring_idx(axial_segments, j), ring_idx(axial_segments, j + 1);
    }

    // Blend stations. With no twist joints the elbow's station sits at the
    // wrist end, so its axial rotation ramps across the whole forearm (the
    // candy-wrapper configuration). Twist joints shorten each ramp.
    std::vector<Station> stations;
    stations.push_back({kUpperArmLength - kBendBand, shoulder_j});
    if (n_twist_joints == 0) {
        stations.push_back({total_length, elbow_j});
    } else {
        stations.push_back({kUpperArmLength + kBendBand, elbow_j});
        for (int k = 1; k <= n_twist_joints; ++k)
            stations.push_back(
                {kUpperArmLength + kForearmLength * k / n_twist_joints, 2 + k});
    }

    auto weights_at = [&](double y) -> std::vector<std::pair<int, double>> {
        if (y <= stations.front().y) return {{stations.front().joint, 1.0}};
        if (y >= stations.back().y) return {{stations.back().joint, 1.0}};
        for (std::size_t s = 0; s + 1 < stations.size(); ++s) {
            if (y <= stations[s + 1].y) {
                double t = smoothstep((y - stations[s].y) / (stations[s + 1].y - stations[s].y));
                if (t <= 0.0) return {{stations[s].joint, 1.0}};
                if (t >= 1.0) return {{stations[s + 1].joint, 1.0}};
                return {{stations[s].joint, 1.0 - t}, {stations[s + 1].joint, t}};
            }
        }
        return {{stations.back().joint, 1.0}};
    };

    rig.skin_weights.indices.setZero(v_count, SkinWeights::kMaxInfluences);
    rig.skin_weights.weights.setZero(v_count, SkinWeights::kMaxInfluences);
    for (Eigen::Index i = 0; i < v_count; ++i) {
        auto ws = weights_at(rig.template_vertices(i, 1));
        double first = ws.size() == 2 ? snap_f32(ws[0].second) : 1.0;
        rig.skin_weights.indices(i, 0) = static_cast<std::uint32_t>(ws[0].first);
        rig.skin_weights.weights(i, 0) = first;
        if (ws.size() == 2) {
            rig.skin_weights.indices(i, 1) = static_cast<std::uint32_t>(ws[1].first);
            rig.skin_weights.weights(i, 1) = 1.0 - first;  // rows sum to 1 exactly
        }
    }

    // Twist-sine correctives: one per twisting carrier, covering the ramp zone
    // into that carrier. Radial bulge compensates the blend pinch, calibrated
    // at a 90-degree relative twist.
    std::vector<int> twist_carriers;
    if (n_twist_joints == 0)
        twist_carriers.push_back(elbow_j);
    else
        for (int k = 1; k <= n_twist_joints; ++k) twist_carriers.push_back(2 + k);

    int n_corr = std::min<int>(n_correctives, static_cast<int>(twist_carriers.size()));
    for (int c = 0; c < n_corr; ++c) {
        int carrier = twist_carriers[c];
        // Find the ramp zone whose distal station is this carrier.
        double y_lo = 0.0, y_hi = 0.0;
        for (std::size_t s = 0; s + 1 < stations.size(); ++s) {
            if (stations[s + 1].joint == carrier) {
                y_lo = stations[s].y;
                y_hi = stations[s + 1].y;
            }
        }
        Corrective cor;
        cor.driver.kind = CorrectiveDriver::Kind::twist_sine;
        cor.driver.joint_index = carrier;
        cor.displacement = PointArray::Zero(v_count, 3);
        for (Eigen::Index i = 0; i < v_count; ++i) {
            double y = rig.template_vertices(i, 1);
            if (y <= y_lo || y >= y_hi) continue;
            double w = smoothstep((y - y_lo) / (y_hi - y_lo));
            double pinch = std::sqrt(w * w + (1.0 - w) * (1.0 - w));  // |blend| at 90 deg
            double x = rig.template_vertices(i, 0), z = rig.template_vertices(i, 2);
            double r = std::sqrt(x * x + z * z);
            if (r < 1e-9) continue;
            double bulge = (1.0 / pinch - 1.0);
            cor.displacement(i, 0) = snap_f32(x * bulge);
            cor.displacement(i, 2) = snap_f32(z * bulge);
        }
        rig.correctives.push_back(std::move(cor));
    }

    rig.validate();
    return rig;
}

// --------------------------------------------------------------------------
// Motion
// --------------------------------------------------------------------------

MotionKind motion_from_string(const std::string& name) {
    if (name == "pronation") return MotionKind::pronation;
    if (name == "elbow-flex") return MotionKind::elbow_flex;
    if (name == "composite") return MotionKind::composite;
    throw ContractError("unknown motion: " + name);
}

std::string motion_to_string(MotionKind kind) {
    switch (kind) {
        case MotionKind::pronation: return "pronation";
        case MotionKind::elbow_flex: return "elbow-flex";
        case MotionKind::composite: return "composite";
    }
    return "pronation";
}

Pose limb_pose(const Rig& rig, double pronation_rad, double elbow_flex_rad) {
    int n_twist = 0;
    for (const Joint& j : rig.joints)
        if (j.name.rfind("twist_", 0) == 0) ++n_twist;
    int elbow_j = -1;
    for (int j = 0; j < rig.joint_count(); ++j)
        if (rig.joints[j].name == "elbow") elbow_j = j;
    if (elbow_j < 0) throw PoseShapeError("limb_pose requires a joint named 'elbow'");

    Pose pose = Pose::rest(rig.joint_count());
    Quat flex(Eigen::AngleAxisd(elbow_flex_rad, Vec3::UnitX()));
    if (n_twist == 0) {
        Quat twist(Eigen::AngleAxisd(pronation_rad, Vec3::UnitY()));
        pose.joint_rotations[elbow_j] = flex * twist;  // twist about the bone, then flex
    } else {
        pose.joint_rotations[elbow_j] = flex;
        Quat per_joint(Eigen::AngleAxisd(pronation_rad / n_twist, Vec3::UnitY()));
        for (int j = 0; j < rig.joint_count(); ++j)
            if (rig.joints[j].name.rfind("twist_", 0) == 0) pose.joint_rotations[j] = per_joint;
    }
    return pose;
}

std::vector<std::pair<Pose, Camera>> make_synthetic_sequence(const Rig& rig, MotionKind motion,
                                                             int n_frames, const OrbitSpec& orbit,
                                                             int width, int height) {
    if (n_frames < 2) throw ContractError("sequence needs at least 2 frames");
    std::vector<std::pair<Pose, Camera>> out;
    out.reserve(n_frames);
    const double max_pronation = 120.0 * M_PI / 180.0;
    const double max_flex = 75.0 * M_PI / 180.0;
    for (int t = 0; t < n_frames; ++t) {
        double u = static_cast<double>(t) / (n_frames - 1);
        double pronation = 0.0, flex = 0.0;
        switch (motion) {
            case MotionKind::pronation: pronation = u * max_pronation; break;
            case MotionKind::elbow_flex: flex = u * max_flex; break;
            case MotionKind::composite:
                pronation = u * max_pronation;
                flex = 35.0 * M_PI / 180.0 * std::sin(u * M_PI);
                break;
        }
        Pose pose = limb_pose(rig, pronation, flex);
        double azimuth = orbit.start_azimuth + orbit.sweep * u;
        Vec3 eye = orbit.center +
                   Vec3(orbit.radius * std::cos(azimuth), orbit.elevation,
                        orbit.radius * std::sin(azimuth));
        Camera cam = Camera::look_at(eye, orbit.center, Vec3::UnitY(), orbit.focal_scale * width,
                                     orbit.focal_scale * width, width, height, 0.05, 10.0);
        out.emplace_back(std::move(pose), cam);
    }
    return out;
}

// --------------------------------------------------------------------------
// Ground truth
// --------------------------------------------------------------------------

namespace {

BoundGaussianSet make_oracle_set(const Rig& rig, const OracleAppearance& appearance) {
    const Eigen::Index f_count = rig.face_count();
    BoundGaussianSet set;
    set.resize(f_count * 4);
    std::mt19937_64 rng(appearance.seed);
    auto unit = [&]() {
        double u = (rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0;
        return u;
    };
    // Smooth striped color field: per channel a random direction, frequency
    // and phase; evaluated at face centroids.
    Vec3 dir[3];
    double freq[3], phase[3];
    for (int c = 0; c < 3; ++c) {
        dir[c] = Vec3(unit(), unit(), unit()).normalized();
        freq[c] = 20.0 + 20.0 * ((rng() >> 11) * 0x1.0p-53);
        phase[c] = 2.0 * M_PI * ((rng() >> 11) * 0x1.0p-53);
    }
    const double offsets[4][2] = {{-0.22, -0.22}, {0.22, -0.22}, {-0.22, 0.22}, {0.22, 0.22}};
    const double opacity_logit_v = logit(appearance.opacity);
    const double log_tangent = std::log(0.45), log_normal = std::log(0.08);
    for (Eigen::Index f = 0; f < f_count; ++f) {
        Vec3 centroid = (Vec3(rig.template_vertices.row(rig.faces(f, 0))) +
                         Vec3(rig.template_vertices.row(rig.faces(f, 1))) +
                         Vec3(rig.template_vertices.row(rig.faces(f, 2)))) /
                        3.0;
        Vec3 color;
        for (int c = 0; c < 3; ++c)
            color[c] =
                std::clamp(0.5 + 0.33 * std::sin(freq[c] * dir[c].dot(centroid) + phase[c]), 0.1,
                           0.9);
        for (int k = 0; k < 4; ++k) {
            Eigen::Index i = f * 4 + k;
            set.triangle_index[i] = static_cast<std::uint32_t>(f);
            set.local_position.row(i) << offsets[k][0], offsets[k][1], 0.0;
            set.local_rotation.row(i) << 1.0, 0.0, 0.0, 0.0;
            set.local_log_scale.row(i) << log_tangent, log_tangent, log_normal;
            set.opacity_logit[i] = opacity_logit_v;
            for (int c = 0; c < 3; ++c) set.color_raw(i, c) = logit(color[c]);
        }
    }
    return set;
}

std::string frame_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", index);
    return buf;
}

}  // namespace

Dataset render_ground_truth(const Rig& oracle_rig, const GroundTruthConfig& config,
                            const std::filesystem::path& out_dir) {
    const int n_frames = config.n_train + config.n_test;
    auto sequence = make_synthetic_sequence(oracle_rig, config.motion, n_frames, config.orbit,
                                            config.width, config.height);
    BoundGaussianSet oracle = make_oracle_set(oracle_rig, config.appearance);

    std::filesystem::create_directories(out_dir / "images");
    std::filesystem::create_directories(out_dir / "masks");

    Dataset ds;
    ds.root = out_dir;
    ds.rig_file = "rig.rigjson";
    save_rig(oracle_rig, out_dir / ds.rig_file);
    ds.rig = oracle_rig;
    ds.frames.resize(n_frames);

    // Scene extent: bounding-box diagonal over all posed frames.
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::max());
    Vec3 hi = Vec3::Constant(std::numeric_limits<double>::lowest());
    Shape rest_shape = Shape::zeros(oracle_rig.shape_count());
    for (int t = 0; t < n_frames; ++t) {
        PointArray verts = skin_vertices(oracle_rig, sequence[t].first, rest_shape);
        lo = lo.cwiseMin(Vec3(verts.colwise().minCoeff()));
        hi = hi.cwiseMax(Vec3(verts.colwise().maxCoeff()));
    }
    ds.scene_extent = (hi - lo).norm();

    parallel_for(n_frames, config.workers, [&](std::int64_t t) {
        const auto& [pose, camera] = sequence[t];
        PointArray verts = skin_vertices(oracle_rig, pose, rest_shape);
        WorldGaussians world = bind_all(oracle, verts, oracle_rig.faces);
        RasterizeConfig rc;
        rc.workers = 1;  // frames are already parallel
        RenderOutput render = rasterize(world, camera, rc);
        Image mask(render.alpha.height, render.alpha.width, 1);
        for (std::size_t i = 0; i < mask.size(); ++i)
            mask.data[i] = render.alpha.data[i] > 0.5 ? 1.0 : 0.0;
        std::string name = frame_name(static_cast<int>(t));
        write_png(out_dir / "images" / (name + ".png"), render.rgb);
        write_png(out_dir / "masks" / (name + ".png"), mask);
    });

    for (int t = 0; t < n_frames; ++t) {
        std::string name = frame_name(t);
        std::string cam_id = "cam" + name;
        ds.cameras.emplace(cam_id, sequence[t].second);
        FrameRecord f;
        f.index = t;
        f.image_path = "images/" + name + ".png";
        f.mask_path = "masks/" + name + ".png";
        f.camera_id = cam_id;
        f.pose = sequence[t].first;
        ds.frames[t] = std::move(f);
        if (t < config.n_train)
            ds.train_split.push_back(t);
        else
            ds.test_split.push_back(t);
    }
    save_dataset_manifest(ds);
    ds.validate();
    return ds;
}

}  // namespace rigsplat
