#include "rigsplat/rig_model.hpp"

#include "rigsplat/blob_container.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace rigsplat {

using nlohmann::json;

// --------------------------------------------------------------------------
// Validation
// --------------------------------------------------------------------------

void Rig::validate() {
    const Eigen::Index v_count = template_vertices.rows();
    const int j_count = joint_count();

    if (v_count == 0) throw RigFormatError("template_vertices", "rig has no vertices");
    if (faces.rows() == 0) throw RigFormatError("faces", "rig has no faces");
    if (j_count == 0) throw RigFormatError("joints", "rig has no joints");

    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        for (int k = 0; k < 3; ++k)
            if (faces(f, k) >= v_count)
                throw RigFormatError("faces", "face " + std::to_string(f) +
                                                  " references vertex " +
                                                  std::to_string(faces(f, k)) + " >= V");
        Vec3 v0 = template_vertices.row(faces(f, 0));
        Vec3 e1 = Vec3(template_vertices.row(faces(f, 1))) - v0;
        Vec3 e2 = Vec3(template_vertices.row(faces(f, 2))) - v0;
        double area = 0.5 * e1.cross(e2).norm();
        if (!(area > 1e-12))
            throw RigFormatError("faces", "face " + std::to_string(f) + " is degenerate (area " +
                                              std::to_string(area) + ")");
    }

    // Parent indices must form a forest; joint 0 must be a root.
    if (joints[0].parent != -1) throw RigFormatError("joints", "joint 0 must be a root");
    for (int j = 0; j < j_count; ++j) {
        int p = joints[j].parent;
        if (p < -1 || p >= j_count)
            throw RigFormatError("joints",
                                 "joint " + std::to_string(j) + " has invalid parent index");
        if (p == j) throw RigFormatError("joints", "joint " + std::to_string(j) + " is its own parent");
        double nq = joints[j].rest_rotation.norm();
        if (std::abs(nq - 1.0) > 1e-6)
            throw RigFormatError("joints",
                                 "joint " + std::to_string(j) + " rest rotation is not unit");
    }
    // Cycle check + topological order via iterative parent walking.
    topo_order_.clear();
    std::vector<int> state(j_count, 0);  // 0 unvisited, 1 in-progress, 2 done
    for (int j = 0; j < j_count; ++j) {
        if (state[j] == 2) continue;
        std::vector<int> chain;
        int cur = j;
        while (cur != -1 && state[cur] == 0) {
            state[cur] = 1;
            chain.push_back(cur);
            cur = joints[cur].parent;
        }
        if (cur != -1 && state[cur] == 1)
            throw RigFormatError("joints", "joint parent indices contain a cycle through joint " +
                                               std::to_string(cur));
        for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
            state[*it] = 2;
            topo_order_.push_back(*it);
        }
    }

    if (skin_weights.rows() != v_count)
        throw RigFormatError("skin_weights", "row count " + std::to_string(skin_weights.rows()) +
                                                 " != vertex count");
    if (skin_weights.indices.rows() != v_count)
        throw RigFormatError("skin_weights", "index rows != vertex count");
    for (Eigen::Index i = 0; i < v_count; ++i) {
        double sum = 0.0;
        for (int k = 0; k < SkinWeights::kMaxInfluences; ++k) {
            double w = skin_weights.weights(i, k);
            if (w < 0.0)
                throw RigFormatError("skin_weights",
                                     "vertex " + std::to_string(i) + " has a negative weight");
            if (w > 0.0 && skin_weights.indices(i, k) >= static_cast<std::uint32_t>(j_count))
                throw RigFormatError("skin_weights", "vertex " + std::to_string(i) +
                                                         " references joint >= J");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-6)
            throw RigFormatError("skin_weights", "vertex " + std::to_string(i) +
                                                     " weights sum to " + std::to_string(sum));
    }

    for (int s = 0; s < shape_count(); ++s)
        if (shape_basis[s].rows() != v_count)
            throw RigFormatError("shape_basis",
                                 "blendshape " + std::to_string(s) + " row count != V");
    for (int c = 0; c < corrective_count(); ++c) {
        const Corrective& cor = correctives[c];
        if (cor.displacement.rows() != v_count)
            throw RigFormatError("corrective_basis",
                                 "corrective " + std::to_string(c) + " row count != V");
        if (cor.driver.joint_index < 0 || cor.driver.joint_index >= j_count)
            throw RigFormatError("corrective_basis",
                                 "corrective " + std::to_string(c) + " joint index out of range");
        if (cor.driver.kind == CorrectiveDriver::Kind::rotation_residual &&
            (cor.driver.component_index < 0 || cor.driver.component_index >= 9))
            throw RigFormatError("corrective_basis", "corrective " + std::to_string(c) +
                                                         " component index out of range");
    }
}

Vec3 Rig::twist_axis(int joint_index) const {
    for (int j = 0; j < joint_count(); ++j) {
        if (joints[j].parent == joint_index) {
            double n = joints[j].rest_translation.norm();
            if (n > 1e-12) return joints[j].rest_translation / n;
        }
    }
    return Vec3(0.0, 1.0, 0.0);
}

// --------------------------------------------------------------------------
// Pose / shape validation
// --------------------------------------------------------------------------

void validate_pose(const Rig& rig, const Pose& pose) {
    if (static_cast<int>(pose.joint_rotations.size()) != rig.joint_count())
        throw PoseShapeError("pose has " + std::to_string(pose.joint_rotations.size()) +
                             " joint rotations, rig has " + std::to_string(rig.joint_count()));
    for (std::size_t j = 0; j < pose.joint_rotations.size(); ++j) {
        double n = pose.joint_rotations[j].norm();
        if (!(n > 1e-8))
            throw PoseShapeError("degenerate quaternion at joint " + std::to_string(j) +
                                 " (norm " + std::to_string(n) + ")");
        if (!std::isfinite(n))
            throw PoseShapeError("non-finite quaternion at joint " + std::to_string(j));
    }
    if (!pose.root_translation.allFinite())
        throw PoseShapeError("non-finite root translation");
}

void validate_shape(const Rig& rig, const Shape& shape) {
    if (shape.coefficients.size() != rig.shape_count())
        throw PoseShapeError("shape has " + std::to_string(shape.coefficients.size()) +
                             " coefficients, rig has " + std::to_string(rig.shape_count()));
}

// --------------------------------------------------------------------------
// Swing-twist
// --------------------------------------------------------------------------

std::pair<Quat, Quat> swing_twist(const Quat& q, const Vec3& axis) {
    Vec3 v(q.x(), q.y(), q.z());
    double u = v.dot(axis);
    double norm = std::sqrt(q.w() * q.w() + u * u);
    Quat twist;
    if (norm < 1e-12) {
        // 180-degree pure swing; twist is undefined, take identity.
        twist = Quat::Identity();
    } else {
        Vec3 tv = axis * (u / norm);
        twist = Quat(q.w() / norm, tv.x(), tv.y(), tv.z());
    }
    Quat swing = q * twist.conjugate();
    return {swing, twist};
}

double twist_sine(const Quat& q, const Vec3& axis) {
    Vec3 v(q.x(), q.y(), q.z());
    double u = v.dot(axis);
    double denom = q.w() * q.w() + u * u;
    if (denom < 1e-24) return 0.0;
    return 2.0 * q.w() * u / denom;
}

// --------------------------------------------------------------------------
// Forward kinematics
// --------------------------------------------------------------------------

std::vector<Transform> forward_kinematics(const Rig& rig, const Pose& pose) {
    validate_pose(rig, pose);
    const int j_count = rig.joint_count();
    std::vector<Transform> world(j_count);
    for (int j : rig.topo_order()) {
        const Joint& joint = rig.joints[j];
        Quat q = pose.joint_rotations[j].normalized();
        Transform local{joint.rest_rotation.toRotationMatrix() * q.toRotationMatrix(),
                        joint.rest_translation};
        if (joint.parent < 0) {
            local.translation += pose.root_translation;
            world[j] = local;
        } else {
            world[j] = world[joint.parent] * local;
        }
    }
    return world;
}

std::vector<Transform> rest_transforms(const Rig& rig) {
    std::vector<Transform> rest(rig.joint_count());
    for (int j : rig.topo_order()) {
        const Joint& joint = rig.joints[j];
        Transform local{joint.rest_rotation.toRotationMatrix(), joint.rest_translation};
        rest[j] = joint.parent < 0 ? local : rest[joint.parent] * local;
    }
    return rest;
}

// --------------------------------------------------------------------------
// Blendshapes / correctives / skinning
// --------------------------------------------------------------------------

PointArray shaped_vertices(const Rig& rig, const Shape& shape) {
    validate_shape(rig, shape);
    PointArray out = rig.template_vertices;
    for (int s = 0; s < rig.shape_count(); ++s) {
        double beta = shape.coefficients[s];
        if (beta != 0.0) out += beta * rig.shape_basis[s];
    }
    return out;
}

PointArray corrective_offsets(const Rig& rig, const Pose& pose) {
    validate_pose(rig, pose);
    PointArray out = PointArray::Zero(rig.vertex_count(), 3);
    for (const Corrective& cor : rig.correctives) {
        Quat q = pose.joint_rotations[cor.driver.joint_index].normalized();
        double feature = 0.0;
        if (cor.driver.kind == CorrectiveDriver::Kind::rotation_residual) {
            Mat3 residual = q.toRotationMatrix() - Mat3::Identity();
            feature = residual(cor.driver.component_index / 3, cor.driver.component_index % 3);
        } else {
            feature = twist_sine(q, rig.twist_axis(cor.driver.joint_index));
        }
        if (feature != 0.0) out += feature * cor.displacement;
    }
    return out;
}

PointArray skin_vertices(const Rig& rig, const Pose& pose, const Shape& shape) {
    std::vector<Transform> world = forward_kinematics(rig, pose);
    std::vector<Transform> rest = rest_transforms(rig);
    PointArray rest_verts = shaped_vertices(rig, shape);
    if (rig.corrective_count() > 0) rest_verts += corrective_offsets(rig, pose);

    // Per-joint skinning transform relative to rest.
    std::vector<Transform> skinning(world.size());
    for (std::size_t j = 0; j < world.size(); ++j) skinning[j] = world[j] * rest[j].inverse();

    PointArray out(rig.vertex_count(), 3);
    for (Eigen::Index i = 0; i < rig.vertex_count(); ++i) {
        Vec3 v = rest_verts.row(i);
        Vec3 acc = Vec3::Zero();
        for (int k = 0; k < SkinWeights::kMaxInfluences; ++k) {
            double w = rig.skin_weights.weights(i, k);
            if (w == 0.0) continue;
            acc += w * skinning[rig.skin_weights.indices(i, k)].apply(v);
        }
        out.row(i) = acc;
    }
    return out;
}

// --------------------------------------------------------------------------
// File format
// --------------------------------------------------------------------------

namespace {

constexpr int kRigFormatVersion = 1;

json quat_to_json(const Quat& q) { return json::array({q.w(), q.x(), q.y(), q.z()}); }

Quat quat_from_json(const json& a) {
    if (!a.is_array() || a.size() != 4) throw RigFormatError("joints", "quaternion must have 4 entries");
    return Quat(a[0].get<double>(), a[1].get<double>(), a[2].get<double>(), a[3].get<double>());
}

std::filesystem::path bin_path_for(const std::filesystem::path& manifest_path,
                                   const std::string& bin_name) {
    return manifest_path.parent_path() / bin_name;
}

}  // namespace

void save_rig(const Rig& rig, const std::filesystem::path& path) {
    std::filesystem::path bin_name = path.filename();
    bin_name.replace_extension(".rigbin");

    BlobWriter blobs(bin_path_for(path, bin_name.string()));
    blobs.add_f32("template_vertices",
                  std::span<const double>(rig.template_vertices.data(),
                                          static_cast<std::size_t>(rig.template_vertices.size())));
    blobs.add_u32("faces", std::span<const std::uint32_t>(
                               rig.faces.data(), static_cast<std::size_t>(rig.faces.size())));
    blobs.add_u32("skin_weight_indices",
                  std::span<const std::uint32_t>(
                      rig.skin_weights.indices.data(),
                      static_cast<std::size_t>(rig.skin_weights.indices.size())));
    blobs.add_f32("skin_weight_values",
                  std::span<const double>(rig.skin_weights.weights.data(),
                                          static_cast<std::size_t>(rig.skin_weights.weights.size())));
    for (int s = 0; s < rig.shape_count(); ++s)
        blobs.add_f32("shape_basis_" + std::to_string(s),
                      std::span<const double>(rig.shape_basis[s].data(),
                                              static_cast<std::size_t>(rig.shape_basis[s].size())));
    for (int c = 0; c < rig.corrective_count(); ++c)
        blobs.add_f32("corrective_" + std::to_string(c),
                      std::span<const double>(
                          rig.correctives[c].displacement.data(),
                          static_cast<std::size_t>(rig.correctives[c].displacement.size())));

    json manifest;
    manifest["version"] = kRigFormatVersion;
    manifest["counts"] = {{"vertices", rig.vertex_count()},
                          {"faces", rig.face_count()},
                          {"joints", rig.joint_count()},
                          {"shapes", rig.shape_count()},
                          {"correctives", rig.corrective_count()}};
    json joint_table = json::array();
    for (const Joint& j : rig.joints) {
        joint_table.push_back({{"name", j.name},
                               {"parent", j.parent},
                               {"rest_rotation", quat_to_json(j.rest_rotation)},
                               {"rest_translation",
                                json::array({j.rest_translation.x(), j.rest_translation.y(),
                                             j.rest_translation.z()})},
                               {"max_swing", j.max_swing},
                               {"max_twist", j.max_twist}});
    }
    manifest["joints"] = joint_table;
    json driver_table = json::array();
    for (const Corrective& c : rig.correctives) {
        driver_table.push_back(
            {{"kind", c.driver.kind == CorrectiveDriver::Kind::rotation_residual
                          ? "rotation-matrix-residual"
                          : "twist-angle-sine"},
             {"joint_index", c.driver.joint_index},
             {"component_index", c.driver.component_index}});
    }
    manifest["corrective_drivers"] = driver_table;
    manifest["data_file"] = bin_name.string();
    manifest["blobs"] = blobs.finish();

    write_text_file_atomic(path, manifest.dump(2));
}

Rig load_rig(const std::filesystem::path& path) {
    json manifest;
    try {
        manifest = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw RigFormatError("manifest", std::string("parse failure: ") + e.what());
    }
    try {
        if (manifest.at("version").get<int>() != kRigFormatVersion)
            throw RigFormatError("version", "unsupported rig format version");

        const json& counts = manifest.at("counts");
        const auto v_count = counts.at("vertices").get<Eigen::Index>();
        const auto f_count = counts.at("faces").get<Eigen::Index>();
        const auto j_count = counts.at("joints").get<int>();
        const auto s_count = counts.at("shapes").get<int>();
        const auto c_count = counts.at("correctives").get<int>();

        BlobReader blobs(bin_path_for(path, manifest.at("data_file").get<std::string>()),
                         manifest.at("blobs"));

        Rig rig;
        auto verts = blobs.read_f32_as_double("template_vertices", v_count * 3);
        rig.template_vertices =
            Eigen::Map<const PointArray>(verts.data(), v_count, 3);
        auto faces = blobs.read_u32("faces", f_count * 3);
        rig.faces = Eigen::Map<const FaceArray>(faces.data(), f_count, 3);
        auto widx = blobs.read_u32("skin_weight_indices", v_count * SkinWeights::kMaxInfluences);
        rig.skin_weights.indices = Eigen::Map<const Eigen::Matrix<std::uint32_t, Eigen::Dynamic,
                                                                  SkinWeights::kMaxInfluences,
                                                                  Eigen::RowMajor>>(
            widx.data(), v_count, SkinWeights::kMaxInfluences);
        auto wval = blobs.read_f32_as_double("skin_weight_values",
                                             v_count * SkinWeights::kMaxInfluences);
        rig.skin_weights.weights =
            Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, SkinWeights::kMaxInfluences,
                                           Eigen::RowMajor>>(wval.data(), v_count,
                                                             SkinWeights::kMaxInfluences);

        const json& joint_table = manifest.at("joints");
        if (static_cast<int>(joint_table.size()) != j_count)
            throw RigFormatError("joints", "joint table size does not match counts.joints");
        for (const json& je : joint_table) {
            Joint j;
            j.name = je.at("name").get<std::string>();
            j.parent = je.at("parent").get<int>();
            j.rest_rotation = quat_from_json(je.at("rest_rotation"));
            const json& t = je.at("rest_translation");
            j.rest_translation = Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>());
            j.max_swing = je.value("max_swing", 3.1);
            j.max_twist = je.value("max_twist", 3.1);
            rig.joints.push_back(j);
        }

        for (int s = 0; s < s_count; ++s) {
            auto field = blobs.read_f32_as_double("shape_basis_" + std::to_string(s), v_count * 3);
            rig.shape_basis.push_back(Eigen::Map<const PointArray>(field.data(), v_count, 3));
        }

        const json& driver_table = manifest.at("corrective_drivers");
        if (static_cast<int>(driver_table.size()) != c_count)
            throw RigFormatError("corrective_drivers", "driver table size mismatch");
        for (int c = 0; c < c_count; ++c) {
            const json& de = driver_table[c];
            Corrective cor;
            std::string kind = de.at("kind").get<std::string>();
            if (kind == "rotation-matrix-residual")
                cor.driver.kind = CorrectiveDriver::Kind::rotation_residual;
            else if (kind == "twist-angle-sine")
                cor.driver.kind = CorrectiveDriver::Kind::twist_sine;
            else
                throw RigFormatError("corrective_drivers", "unknown driver kind: " + kind);
            cor.driver.joint_index = de.at("joint_index").get<int>();
            cor.driver.component_index = de.at("component_index").get<int>();
            auto field = blobs.read_f32_as_double("corrective_" + std::to_string(c), v_count * 3);
            cor.displacement = Eigen::Map<const PointArray>(field.data(), v_count, 3);
            rig.correctives.push_back(std::move(cor));
        }

        rig.validate();
        return rig;
    } catch (const json::exception& e) {
        throw RigFormatError("manifest", std::string("missing or invalid field: ") + e.what());
    } catch (const ContractError& e) {
        throw RigFormatError("blobs", e.what());
    }
}

// --------------------------------------------------------------------------
// Pose flat encoding
// --------------------------------------------------------------------------

std::vector<double> pose_to_flat(const Pose& pose) {
    std::vector<double> flat;
    flat.reserve(3 + 4 * pose.joint_rotations.size());
    for (int k = 0; k < 3; ++k) flat.push_back(pose.root_translation[k]);
    for (const Quat& q : pose.joint_rotations) {
        flat.push_back(q.w());
        flat.push_back(q.x());
        flat.push_back(q.y());
        flat.push_back(q.z());
    }
    return flat;
}

Pose pose_from_flat(const std::vector<double>& flat) {
    if (flat.size() < 3 || (flat.size() - 3) % 4 != 0)
        throw PoseShapeError("flat pose array has invalid length " + std::to_string(flat.size()));
    Pose pose;
    pose.root_translation = Vec3(flat[0], flat[1], flat[2]);
    std::size_t j_count = (flat.size() - 3) / 4;
    pose.joint_rotations.reserve(j_count);
    for (std::size_t j = 0; j < j_count; ++j) {
        const double* q = flat.data() + 3 + 4 * j;
        pose.joint_rotations.emplace_back(q[0], q[1], q[2], q[3]);
    }
    return pose;
}

}  // namespace rigsplat
