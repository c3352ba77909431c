#include "rigsplat/triangle_binding.hpp"

#include "rigsplat/blob_container.hpp"
#include "rigsplat/quat_math.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <random>

namespace rigsplat {

using nlohmann::json;

// --------------------------------------------------------------------------
// Frames
// --------------------------------------------------------------------------

TriangleFrame triangle_frame(const Vec3& v0, const Vec3& v1, const Vec3& v2,
                             std::int64_t face_id) {
    Vec3 e1 = v1 - v0;
    Vec3 e2 = v2 - v0;
    Vec3 n_raw = e1.cross(e2);
    double n_norm = n_raw.norm();
    double area = 0.5 * n_norm;
    if (!(area > 1e-12)) throw DegenerateTriangleError(face_id);

    TriangleFrame f;
    f.origin = (v0 + v1 + v2) / 3.0;
    Vec3 c1 = e1 / e1.norm();
    Vec3 c3 = n_raw / n_norm;
    Vec3 c2 = c3.cross(c1);
    f.rotation.col(0) = c1;
    f.rotation.col(1) = c2;
    f.rotation.col(2) = c3;
    f.scale = std::sqrt(area);
    return f;
}

std::vector<TriangleFrame> compute_triangle_frames(const PointArray& vertices,
                                                   const FaceArray& faces) {
    std::vector<TriangleFrame> frames(faces.rows());
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        frames[f] = triangle_frame(vertices.row(faces(f, 0)), vertices.row(faces(f, 1)),
                                   vertices.row(faces(f, 2)), f);
    }
    return frames;
}

// --------------------------------------------------------------------------
// Set access
// --------------------------------------------------------------------------

void BoundGaussianSet::resize(Eigen::Index n) {
    triangle_index.resize(n, 0);
    local_position.conservativeResize(n, 3);
    local_rotation.conservativeResize(n, 4);
    local_log_scale.conservativeResize(n, 3);
    opacity_logit.conservativeResize(n);
    color_raw.conservativeResize(n, 3);
}

BoundGaussian BoundGaussianSet::get(Eigen::Index i) const {
    BoundGaussian g;
    g.triangle_index = triangle_index[i];
    g.local_position = local_position.row(i);
    g.local_rotation = quat_from_row(local_rotation, i);
    g.local_log_scale = local_log_scale.row(i);
    g.opacity_logit = opacity_logit[i];
    g.color_raw = color_raw.row(i);
    return g;
}

void BoundGaussianSet::set(Eigen::Index i, const BoundGaussian& g) {
    triangle_index[i] = g.triangle_index;
    local_position.row(i) = g.local_position;
    quat_to_row(g.local_rotation, local_rotation, i);
    local_log_scale.row(i) = g.local_log_scale;
    opacity_logit[i] = g.opacity_logit;
    color_raw.row(i) = g.color_raw;
}

void BoundGaussianSet::validate() const {
    Eigen::Index n = size();
    if (local_position.rows() != n || local_rotation.rows() != n ||
        local_log_scale.rows() != n || opacity_logit.size() != n || color_raw.rows() != n)
        throw ContractError("BoundGaussianSet parallel arrays have inconsistent lengths");
}

WorldGaussian WorldGaussians::get(Eigen::Index i) const {
    WorldGaussian w;
    w.mean = means.row(i);
    w.rotation = quat_from_row(rotations, i);
    w.scale = scales.row(i);
    w.opacity = opacities[i];
    w.color = colors.row(i);
    return w;
}

// --------------------------------------------------------------------------
// Init
// --------------------------------------------------------------------------

namespace {

// Lemire bounded draw; keeps face assignment independent of the standard
// library's distribution implementation.
std::uint64_t bounded_draw(std::mt19937_64& rng, std::uint64_t bound) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(rng()) * bound) >> 64);
}

}  // namespace

BoundGaussianSet init_gaussians(const FaceArray& faces, const PointArray& posed_vertices,
                                Eigen::Index n_total, std::uint64_t seed) {
    const Eigen::Index f_count = faces.rows();
    if (n_total < f_count)
        throw InitError("n_total (" + std::to_string(n_total) + ") < face count (" +
                        std::to_string(f_count) + ")");
    for (Eigen::Index f = 0; f < f_count; ++f)
        for (int k = 0; k < 3; ++k)
            if (faces(f, k) >= posed_vertices.rows())
                throw InitError("face " + std::to_string(f) + " references vertex out of range");

    BoundGaussianSet set;
    set.resize(n_total);
    std::mt19937_64 rng(seed);
    const double log_half = std::log(0.5);
    const double opacity_init = logit(0.1);
    for (Eigen::Index i = 0; i < n_total; ++i) {
        set.triangle_index[i] =
            i < f_count ? static_cast<std::uint32_t>(i)
                        : static_cast<std::uint32_t>(bounded_draw(rng, f_count));
        set.local_position.row(i).setZero();
        set.local_rotation.row(i) << 1.0, 0.0, 0.0, 0.0;
        set.local_log_scale.row(i).setConstant(log_half);
        set.opacity_logit[i] = opacity_init;
        set.color_raw.row(i).setZero();  // sigmoid(0) = mid-gray
    }
    return set;
}

// --------------------------------------------------------------------------
// Bind
// --------------------------------------------------------------------------

WorldGaussian local_to_world(const BoundGaussian& g, const TriangleFrame& frame) {
    WorldGaussian w;
    w.mean = frame.origin + frame.scale * (frame.rotation * g.local_position);
    Quat frame_q(frame.rotation);
    w.rotation = frame_q * g.local_rotation.normalized();
    w.scale = frame.scale * g.local_log_scale.array().exp().matrix();
    w.opacity = sigmoid(g.opacity_logit);
    for (int c = 0; c < 3; ++c) w.color[c] = sigmoid(g.color_raw[c]);
    return w;
}

WorldGaussians bind_all(const BoundGaussianSet& set, const std::vector<TriangleFrame>& frames) {
    set.validate();
    const Eigen::Index n = set.size();
    WorldGaussians out;
    out.means.resize(n, 3);
    out.rotations.resize(n, 4);
    out.scales.resize(n, 3);
    out.opacities.resize(n);
    out.colors.resize(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        std::uint32_t t = set.triangle_index[i];
        if (t >= frames.size())
            throw ContractError("gaussian " + std::to_string(i) + " references face " +
                                std::to_string(t) + " >= F");
        WorldGaussian w = local_to_world(set.get(i), frames[t]);
        out.means.row(i) = w.mean;
        quat_to_row(w.rotation, out.rotations, i);
        out.scales.row(i) = w.scale;
        out.opacities[i] = w.opacity;
        out.colors.row(i) = w.color;
    }
    return out;
}

WorldGaussians bind_all(const BoundGaussianSet& set, const PointArray& posed_vertices,
                        const FaceArray& faces) {
    return bind_all(set, compute_triangle_frames(posed_vertices, faces));
}

// --------------------------------------------------------------------------
// Backward
// --------------------------------------------------------------------------

void WorldGrads::init_zero(Eigen::Index n) {
    d_mean = PointArray::Zero(n, 3);
    d_rotation = QuatArray::Zero(n, 4);
    d_rotation_mat.assign(n, Mat3::Zero());
    d_scale = PointArray::Zero(n, 3);
    d_opacity = VecX::Zero(n);
    d_color = PointArray::Zero(n, 3);
    d_mean2d.setZero(n, 2);
    visible.assign(n, 0);
}

namespace {

struct FrameGrad {
    Vec3 d_origin = Vec3::Zero();
    double d_scale = 0.0;
    Mat3 d_rotation = Mat3::Zero();
    bool touched = false;
};

// Backward through triangle_frame into the three vertices.
void frame_backward(const Vec3& v0, const Vec3& v1, const Vec3& v2, const FrameGrad& g,
                    Vec3& g_v0, Vec3& g_v1, Vec3& g_v2) {
    Vec3 e1 = v1 - v0;
    Vec3 e2 = v2 - v0;
    Vec3 n_raw = e1.cross(e2);
    double nn = n_raw.norm();
    Vec3 c3 = n_raw / nn;
    double e1n = e1.norm();
    Vec3 c1 = e1 / e1n;
    double s = std::sqrt(0.5 * nn);

    Vec3 g_c1 = g.d_rotation.col(0);
    Vec3 g_c2 = g.d_rotation.col(1);
    Vec3 g_c3 = g.d_rotation.col(2);

    // c2 = c3 x c1
    g_c3 += c1.cross(g_c2);
    g_c1 += g_c2.cross(c3);

    // scale = sqrt(|n_raw| / 2)
    Vec3 g_nraw = (g.d_scale / (4.0 * s)) * c3;
    // c3 = n_raw / |n_raw|
    g_nraw += (g_c3 - c3 * c3.dot(g_c3)) / nn;
    // n_raw = e1 x e2
    Vec3 g_e1 = e2.cross(g_nraw);
    Vec3 g_e2 = g_nraw.cross(e1);
    // c1 = e1 / |e1|
    g_e1 += (g_c1 - c1 * c1.dot(g_c1)) / e1n;

    Vec3 g_origin_third = g.d_origin / 3.0;
    g_v0 += g_origin_third - g_e1 - g_e2;
    g_v1 += g_origin_third + g_e1;
    g_v2 += g_origin_third + g_e2;
}

}  // namespace

BindGrads bind_backward(const BoundGaussianSet& set, const FaceArray& faces,
                        const PointArray& posed_vertices,
                        const std::vector<TriangleFrame>& frames, const WorldGrads& grads,
                        bool with_vertex_grads) {
    set.validate();
    const Eigen::Index n = set.size();
    if (grads.d_mean.rows() != n)
        throw ContractError("world gradient count does not match gaussian set");

    BindGrads out;
    out.d_position = PointArray::Zero(n, 3);
    out.d_rotation = QuatArray::Zero(n, 4);
    out.d_log_scale = PointArray::Zero(n, 3);
    out.d_opacity_logit = VecX::Zero(n);
    out.d_color = PointArray::Zero(n, 3);

    std::vector<FrameGrad> frame_grads;
    if (with_vertex_grads) frame_grads.resize(frames.size());

    for (Eigen::Index i = 0; i < n; ++i) {
        const TriangleFrame& frame = frames[set.triangle_index[i]];
        Vec3 lp = set.local_position.row(i);
        Quat ql_raw = quat_from_row(set.local_rotation, i);
        double ql_norm = ql_raw.norm();
        Quat ql = ql_raw;
        ql.coeffs() /= ql_norm;
        Vec3 lls = set.local_log_scale.row(i);

        Vec3 g_mean = grads.d_mean.row(i);
        Vec3 g_ws = grads.d_scale.row(i);

        // mean = origin + s * R_f * lp
        out.d_position.row(i) = frame.scale * (frame.rotation.transpose() * g_mean);

        // world scale = s * exp(lls)
        Vec3 exp_lls = lls.array().exp().matrix();
        out.d_log_scale.row(i) = (g_ws.array() * (frame.scale * exp_lls).array()).matrix();

        // opacity / color sigmoids
        double op = sigmoid(set.opacity_logit[i]);
        out.d_opacity_logit[i] = op * (1.0 - op) * grads.d_opacity[i];
        for (int c = 0; c < 3; ++c) {
            double col = sigmoid(set.color_raw(i, c));
            out.d_color(i, c) = col * (1.0 - col) * grads.d_color(i, c);
        }

        // world quat = frame_q (x) normalize(ql_raw)
        Quat frame_q(frame.rotation);
        Vec4 g_qw(grads.d_rotation(i, 0), grads.d_rotation(i, 1), grads.d_rotation(i, 2),
                  grads.d_rotation(i, 3));
        Vec4 g_qhat = quat_left_mult_matrix(frame_q).transpose() * g_qw;
        Vec4 qhat(ql.w(), ql.x(), ql.y(), ql.z());
        Vec4 g_qraw = (g_qhat - qhat * qhat.dot(g_qhat)) / ql_norm;
        out.d_rotation.row(i) = g_qraw;

        if (with_vertex_grads) {
            FrameGrad& fg = frame_grads[set.triangle_index[i]];
            fg.touched = true;
            fg.d_origin += g_mean;
            fg.d_scale += g_mean.dot(frame.rotation * lp) + g_ws.dot(exp_lls);
            // mean path: d/dR_f of s * R_f * lp, plus covariance path via the
            // world rotation matrix R_w = R_f * R_l.
            fg.d_rotation += frame.scale * g_mean * lp.transpose() +
                             grads.d_rotation_mat[i] * ql.toRotationMatrix().transpose();
        }
    }

    if (with_vertex_grads) {
        out.d_vertices = PointArray::Zero(posed_vertices.rows(), 3);
        for (Eigen::Index f = 0; f < static_cast<Eigen::Index>(frames.size()); ++f) {
            const FrameGrad& fg = frame_grads[f];
            if (!fg.touched) continue;
            Vec3 g_v0 = Vec3::Zero(), g_v1 = Vec3::Zero(), g_v2 = Vec3::Zero();
            frame_backward(posed_vertices.row(faces(f, 0)), posed_vertices.row(faces(f, 1)),
                           posed_vertices.row(faces(f, 2)), fg, g_v0, g_v1, g_v2);
            out.d_vertices.row(faces(f, 0)) += g_v0;
            out.d_vertices.row(faces(f, 1)) += g_v1;
            out.d_vertices.row(faces(f, 2)) += g_v2;
        }
    } else {
        out.d_vertices = PointArray::Zero(0, 3);
    }
    return out;
}

// --------------------------------------------------------------------------
// Checkpoint IO
// --------------------------------------------------------------------------

void save_gaussians(const BoundGaussianSet& set, const std::filesystem::path& path,
                    std::int64_t iteration, std::uint64_t seed) {
    set.validate();
    std::filesystem::path bin_name = path.filename();
    bin_name.replace_extension(".bin");
    BlobWriter blobs(path.parent_path() / bin_name);
    blobs.add_u32("triangle_index", std::span<const std::uint32_t>(set.triangle_index));
    auto span_of = [](const auto& m) {
        return std::span<const double>(m.data(), static_cast<std::size_t>(m.size()));
    };
    blobs.add_f32("local_position", span_of(set.local_position));
    blobs.add_f32("local_rotation", span_of(set.local_rotation));
    blobs.add_f32("local_log_scale", span_of(set.local_log_scale));
    blobs.add_f32("opacity_logit", span_of(set.opacity_logit));
    blobs.add_f32("color_raw", span_of(set.color_raw));

    json header;
    header["count"] = set.size();
    header["iteration"] = iteration;
    header["seed"] = seed;
    header["data_file"] = bin_name.string();
    header["blobs"] = blobs.finish();
    write_text_file_atomic(path, header.dump(2));
}

LoadedGaussians load_gaussians(const std::filesystem::path& path) {
    json header = json::parse(read_text_file(path));
    const auto n = header.at("count").get<Eigen::Index>();
    BlobReader blobs(path.parent_path() / header.at("data_file").get<std::string>(),
                     header.at("blobs"));

    LoadedGaussians out;
    out.iteration = header.at("iteration").get<std::int64_t>();
    out.seed = header.at("seed").get<std::uint64_t>();
    out.set.triangle_index = blobs.read_u32("triangle_index", n);
    auto lp = blobs.read_f32_as_double("local_position", n * 3);
    out.set.local_position = Eigen::Map<const PointArray>(lp.data(), n, 3);
    auto lr = blobs.read_f32_as_double("local_rotation", n * 4);
    out.set.local_rotation = Eigen::Map<const QuatArray>(lr.data(), n, 4);
    auto lls = blobs.read_f32_as_double("local_log_scale", n * 3);
    out.set.local_log_scale = Eigen::Map<const PointArray>(lls.data(), n, 3);
    auto ol = blobs.read_f32_as_double("opacity_logit", n);
    out.set.opacity_logit = Eigen::Map<const VecX>(ol.data(), n);
    auto cr = blobs.read_f32_as_double("color_raw", n * 3);
    out.set.color_raw = Eigen::Map<const PointArray>(cr.data(), n, 3);
    out.set.validate();
    return out;
}

}  // namespace rigsplat
