#include "rigsplat/rig_model.hpp"

#include "rigsplat/dataset_synth.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <random>

using namespace rigsplat;

namespace {

// Independent 4x4 homogeneous-matrix FK oracle.
Eigen::Matrix4d to_mat4(const Mat3& r, const Vec3& t) {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.block<3, 3>(0, 0) = r;
    m.block<3, 1>(0, 3) = t;
    return m;
}

std::vector<Eigen::Matrix4d> fk_oracle(const Rig& rig, const Pose& pose) {
    std::vector<Eigen::Matrix4d> world(rig.joint_count());
    for (int j : rig.topo_order()) {
        Eigen::Matrix4d local =
            to_mat4(rig.joints[j].rest_rotation.toRotationMatrix(), rig.joints[j].rest_translation) *
            to_mat4(pose.joint_rotations[j].normalized().toRotationMatrix(), Vec3::Zero());
        if (rig.joints[j].parent < 0)
            world[j] = to_mat4(Mat3::Identity(), pose.root_translation) * local;
        else
            world[j] = world[rig.joints[j].parent] * local;
    }
    return world;
}

}  // namespace

TEST_CASE("forward kinematics identity and analytic cases") {
    Rig rig = test::make_two_bone_rig();

    SUBCASE("rest pose reproduces accumulated rest transforms") {
        auto world = forward_kinematics(rig, Pose::rest(2));
        auto rest = rest_transforms(rig);
        for (int j = 0; j < 2; ++j) {
            CHECK((world[j].rotation - rest[j].rotation).norm() <= 1e-9);
            CHECK((world[j].translation - rest[j].translation).norm() <= 1e-9);
        }
    }

    SUBCASE("90 degree rotation about z maps +x to +y") {
        Pose pose = Pose::rest(2);
        pose.joint_rotations[0] = Quat(Eigen::AngleAxisd(M_PI / 2, Vec3::UnitZ()));
        auto world = forward_kinematics(rig, pose);
        Vec3 mapped = world[0].apply(Vec3(1, 0, 0));
        CHECK((mapped - Vec3(0, 1, 0)).norm() <= 1e-12);
        // Child joint (offset (1,0,0)) lands at (0,1,0).
        CHECK((world[1].translation - Vec3(0, 1, 0)).norm() <= 1e-12);
    }

    SUBCASE("random chain matches 4x4 matrix-product oracle") {
        std::mt19937_64 rng(42);
        for (int trial = 0; trial < 25; ++trial) {
            Pose pose;
            pose.root_translation =
                Vec3(test::uniform(rng, -1, 1), test::uniform(rng, -1, 1), test::uniform(rng, -1, 1));
            pose.joint_rotations = {test::random_quat(rng), test::random_quat(rng)};
            auto world = forward_kinematics(rig, pose);
            auto oracle = fk_oracle(rig, pose);
            for (int j = 0; j < 2; ++j) {
                Eigen::Matrix4d got = to_mat4(world[j].rotation, world[j].translation);
                CHECK((got - oracle[j]).cwiseAbs().maxCoeff() <= 1e-12);
            }
        }
    }

    SUBCASE("dimension mismatch is a PoseShapeError") {
        CHECK_THROWS_AS(forward_kinematics(rig, Pose::rest(3)), PoseShapeError);
    }

    SUBCASE("degenerate quaternion is an error, not normalized") {
        Pose pose = Pose::rest(2);
        pose.joint_rotations[1] = Quat(1e-12, 0, 0, 0);
        CHECK_THROWS_AS(forward_kinematics(rig, pose), PoseShapeError);
    }
}

TEST_CASE("shaped_vertices matches naive blendshape oracle") {
    Rig rig = test::make_two_bone_rig();
    std::mt19937_64 rng(7);
    for (int s = 0; s < 3; ++s) {
        PointArray basis(rig.vertex_count(), 3);
        for (Eigen::Index i = 0; i < basis.size(); ++i)
            basis.data()[i] = test::uniform(rng, -0.1, 0.1);
        rig.shape_basis.push_back(basis);
    }
    rig.validate();

    SUBCASE("zero shape returns the template exactly") {
        PointArray out = shaped_vertices(rig, Shape::zeros(3));
        CHECK((out - rig.template_vertices).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("unit coefficient adds exactly the first basis") {
        Shape shape = Shape::zeros(3);
        shape.coefficients[0] = 1.0;
        PointArray out = shaped_vertices(rig, shape);
        CHECK((out - (rig.template_vertices + rig.shape_basis[0])).cwiseAbs().maxCoeff() <= 1e-15);
    }
    SUBCASE("random coefficients match a per-vertex loop oracle") {
        Shape shape = Shape::zeros(3);
        for (int s = 0; s < 3; ++s) shape.coefficients[s] = test::uniform(rng, -2, 2);
        PointArray out = shaped_vertices(rig, shape);
        for (Eigen::Index i = 0; i < rig.vertex_count(); ++i)
            for (int c = 0; c < 3; ++c) {
                double expect = rig.template_vertices(i, c);
                for (int s = 0; s < 3; ++s)
                    expect += shape.coefficients[s] * rig.shape_basis[s](i, c);
                CHECK(out(i, c) == doctest::Approx(expect).epsilon(1e-12));
            }
    }
    SUBCASE("coefficient count mismatch throws") {
        CHECK_THROWS_AS(shaped_vertices(rig, Shape::zeros(2)), PoseShapeError);
    }
}

TEST_CASE("swing-twist decomposition") {
    std::mt19937_64 rng(13);

    SUBCASE("pure twist of 90 degrees has sine 1") {
        Vec3 axis(0, 1, 0);
        Quat q(Eigen::AngleAxisd(M_PI / 2, axis));
        CHECK(twist_sine(q, axis) == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("30 degree swing with 45 degree twist extracts sin(45)") {
        Vec3 axis(0, 1, 0);
        Quat swing(Eigen::AngleAxisd(30.0 * M_PI / 180.0, Vec3::UnitX()));
        Quat twist(Eigen::AngleAxisd(45.0 * M_PI / 180.0, axis));
        Quat q = swing * twist;
        CHECK(twist_sine(q, axis) == doctest::Approx(std::sin(M_PI / 4)).epsilon(1e-12));

        // Independent decomposition oracle: project, normalize, measure.
        auto [s, t] = swing_twist(q, axis);
        double angle = 2.0 * std::atan2(Vec3(t.x(), t.y(), t.z()).dot(axis), t.w());
        CHECK(angle == doctest::Approx(M_PI / 4).epsilon(1e-12));
        // Swing has no component about the twist axis.
        CHECK(std::abs(Vec3(s.x(), s.y(), s.z()).dot(axis)) <= 1e-12);
    }

    SUBCASE("recomposition swing*twist recovers the quaternion up to sign") {
        for (int trial = 0; trial < 50; ++trial) {
            Quat q = test::random_quat(rng);
            Vec3 axis = test::random_unit_vec(rng);
            auto [s, t] = swing_twist(q, axis);
            Quat back = s * t;
            double err = std::min((back.coeffs() - q.coeffs()).norm(),
                                  (back.coeffs() + q.coeffs()).norm());
            CHECK(err <= 1e-9);
        }
    }
}

TEST_CASE("corrective offsets") {
    Rig rig = test::make_two_bone_rig();
    std::mt19937_64 rng(5);
    PointArray field_a(rig.vertex_count(), 3), field_b(rig.vertex_count(), 3);
    for (Eigen::Index i = 0; i < field_a.size(); ++i) {
        field_a.data()[i] = test::uniform(rng, -0.2, 0.2);
        field_b.data()[i] = test::uniform(rng, -0.2, 0.2);
    }
    Corrective rot_residual;
    rot_residual.driver.kind = CorrectiveDriver::Kind::rotation_residual;
    rot_residual.driver.joint_index = 1;
    rot_residual.driver.component_index = 1;  // entry (0,1) of R - I
    rot_residual.displacement = field_a;
    Corrective twist;
    twist.driver.kind = CorrectiveDriver::Kind::twist_sine;
    twist.driver.joint_index = 1;
    twist.displacement = field_b;
    rig.correctives = {rot_residual, twist};
    rig.validate();

    SUBCASE("rest pose gives exactly zero offsets for both kinds") {
        PointArray out = corrective_offsets(rig, Pose::rest(2));
        CHECK(out.cwiseAbs().maxCoeff() <= 1e-12);
        // Rotation residual is exactly zero at rest.
        Pose rest = Pose::rest(2);
        Quat q = rest.joint_rotations[1];
        CHECK((q.toRotationMatrix() - Mat3::Identity()).norm() == 0.0);
    }

    SUBCASE("90 degree pure twist activates the twist corrective fully") {
        Pose pose = Pose::rest(2);
        // Joint 1 is a leaf; its twist axis is local +y.
        pose.joint_rotations[1] = Quat(Eigen::AngleAxisd(M_PI / 2, Vec3::UnitY()));
        PointArray out = corrective_offsets(rig, pose);
        // Rotation residual entry (0,1) for a +y rotation is 0.
        CHECK((out - field_b).cwiseAbs().maxCoeff() <= 1e-12);
    }

    SUBCASE("mixed swing and twist uses the projected twist only") {
        Pose pose = Pose::rest(2);
        Quat swing(Eigen::AngleAxisd(30.0 * M_PI / 180.0, Vec3::UnitX()));
        Quat tw(Eigen::AngleAxisd(45.0 * M_PI / 180.0, Vec3::UnitY()));
        pose.joint_rotations[1] = swing * tw;
        PointArray out = corrective_offsets(rig, pose);
        Mat3 residual = pose.joint_rotations[1].toRotationMatrix() - Mat3::Identity();
        PointArray expect = residual(0, 1) * field_a + std::sin(M_PI / 4) * field_b;
        CHECK((out - expect).cwiseAbs().maxCoeff() <= 1e-12);
    }
}

TEST_CASE("skin_vertices") {
    Rig rig = test::make_two_bone_rig();

    SUBCASE("rest pose with zero shape returns the template within 1e-9") {
        PointArray out = skin_vertices(rig, Pose::rest(2), Shape::zeros(0));
        CHECK((out - rig.template_vertices).cwiseAbs().maxCoeff() <= 1e-9);
    }

    SUBCASE("all weight on one rotated joint moves vertices rigidly") {
        Rig solo = rig;
        solo.skin_weights.weights.setZero();
        for (Eigen::Index i = 0; i < solo.vertex_count(); ++i) {
            solo.skin_weights.indices(i, 0) = 0;
            solo.skin_weights.weights(i, 0) = 1.0;
        }
        solo.validate();
        Pose pose = Pose::rest(2);
        pose.joint_rotations[0] = Quat(Eigen::AngleAxisd(M_PI / 2, Vec3::UnitZ()));
        PointArray out = skin_vertices(solo, pose, Shape::zeros(0));
        Mat3 r = pose.joint_rotations[0].toRotationMatrix();
        for (Eigen::Index i = 0; i < solo.vertex_count(); ++i) {
            Vec3 expect = r * Vec3(solo.template_vertices.row(i));
            CHECK((Vec3(out.row(i)) - expect).norm() <= 1e-12);
        }
    }

    SUBCASE("blended weights match a dense per-vertex LBS oracle") {
        std::mt19937_64 rng(99);
        for (int trial = 0; trial < 10; ++trial) {
            Pose pose;
            pose.root_translation = Vec3(test::uniform(rng, -1, 1), test::uniform(rng, -1, 1),
                                         test::uniform(rng, -1, 1));
            pose.joint_rotations = {test::random_quat(rng), test::random_quat(rng)};
            PointArray out = skin_vertices(rig, pose, Shape::zeros(0));

            auto world = forward_kinematics(rig, pose);
            auto rest = rest_transforms(rig);
            for (Eigen::Index i = 0; i < rig.vertex_count(); ++i) {
                Vec3 v = rig.template_vertices.row(i);
                Vec3 expect = Vec3::Zero();
                for (int j = 0; j < 2; ++j) {
                    double w = 0.0;
                    for (int k = 0; k < SkinWeights::kMaxInfluences; ++k)
                        if (rig.skin_weights.indices(i, k) == static_cast<std::uint32_t>(j))
                            w += rig.skin_weights.weights(i, k);
                    expect += w * (world[j] * rest[j].inverse()).apply(v);
                }
                CHECK((Vec3(out.row(i)) - expect).norm() <= 1e-12);
            }
        }
    }

    SUBCASE("two-bone 50/50 vertex sits at the blend of both candidates") {
        Rig blend = rig;
        blend.skin_weights.weights(2, 0) = 0.5;  // vertex 2: 50/50 between the bones
        blend.skin_weights.weights(2, 1) = 0.5;
        blend.validate();
        Pose pose = Pose::rest(2);
        pose.joint_rotations[1] = Quat(Eigen::AngleAxisd(M_PI / 2, Vec3::UnitZ()));
        PointArray out = skin_vertices(blend, pose, Shape::zeros(0));
        // Vertex 1 at (1,0,0) is the pivot of bone 1: both bones leave it.
        CHECK((Vec3(out.row(1)) - Vec3(1, 0, 0)).norm() <= 1e-12);
        // Vertex 2 at (1,1,0): bone 0 keeps it, bone 1 maps it to the origin;
        // the 50/50 blend is the midpoint.
        CHECK((Vec3(out.row(2)) - Vec3(0.5, 0.5, 0)).norm() <= 1e-12);
    }
}

TEST_CASE("skinning properties") {
    Rig rig = test::make_two_bone_rig();
    std::mt19937_64 rng(1234);

    SUBCASE("global rigid equivariance") {
        for (int trial = 0; trial < 20; ++trial) {
            Pose pose;
            pose.root_translation = Vec3::Zero();
            pose.joint_rotations = {test::random_quat(rng), test::random_quat(rng)};
            PointArray base = skin_vertices(rig, pose, Shape::zeros(0));

            Quat g = test::random_quat(rng);
            Vec3 t(test::uniform(rng, -2, 2), test::uniform(rng, -2, 2), test::uniform(rng, -2, 2));
            Pose moved = pose;
            moved.joint_rotations[0] = g * pose.joint_rotations[0];
            moved.root_translation = t;
            PointArray out = skin_vertices(rig, moved, Shape::zeros(0));
            Mat3 r = g.toRotationMatrix();
            for (Eigen::Index i = 0; i < base.rows(); ++i) {
                Vec3 expect = r * Vec3(base.row(i)) + t;
                CHECK((Vec3(out.row(i)) - expect).norm() <= 1e-7);
            }
        }
    }

    SUBCASE("rescaling and renormalizing one vertex's weights changes nothing") {
        std::mt19937_64 rng2(5);
        Pose pose;
        pose.root_translation = Vec3(0.1, -0.2, 0.3);
        pose.joint_rotations = {test::random_quat(rng2), test::random_quat(rng2)};
        PointArray base = skin_vertices(rig, pose, Shape::zeros(0));

        Rig scaled = rig;
        // Scale vertex 1's weights by 7 then renormalize: identical result.
        double sum = 0.0;
        for (int k = 0; k < SkinWeights::kMaxInfluences; ++k) {
            scaled.skin_weights.weights(1, k) *= 7.0;
            sum += scaled.skin_weights.weights(1, k);
        }
        for (int k = 0; k < SkinWeights::kMaxInfluences; ++k)
            scaled.skin_weights.weights(1, k) /= sum;
        scaled.validate();
        PointArray out = skin_vertices(scaled, pose, Shape::zeros(0));
        CHECK((out - base).cwiseAbs().maxCoeff() <= 1e-9);
    }
}

TEST_CASE("rig file round-trip and validation") {
    test::TempDir dir("rig");
    Rig rig = make_synthetic_limb_rig(3, 3, 8, 8);

    SUBCASE("save then load is bit-exact") {
        save_rig(rig, dir.path / "limb.rigjson");
        Rig back = load_rig(dir.path / "limb.rigjson");
        CHECK(back.template_vertices == rig.template_vertices);
        CHECK(back.faces == rig.faces);
        CHECK(back.skin_weights.indices == rig.skin_weights.indices);
        CHECK(back.skin_weights.weights == rig.skin_weights.weights);
        REQUIRE(back.joint_count() == rig.joint_count());
        for (int j = 0; j < rig.joint_count(); ++j) {
            CHECK(back.joints[j].name == rig.joints[j].name);
            CHECK(back.joints[j].parent == rig.joints[j].parent);
            CHECK(back.joints[j].rest_rotation.coeffs() == rig.joints[j].rest_rotation.coeffs());
            CHECK(back.joints[j].rest_translation == rig.joints[j].rest_translation);
        }
        REQUIRE(back.corrective_count() == rig.corrective_count());
        for (int c = 0; c < rig.corrective_count(); ++c) {
            CHECK(back.correctives[c].displacement == rig.correctives[c].displacement);
            CHECK(back.correctives[c].driver.joint_index == rig.correctives[c].driver.joint_index);
        }
        // Second save produces identical bytes.
        save_rig(back, dir.path / "limb2.rigjson");
        CHECK(read_text_file(dir.path / "limb.rigbin") == read_text_file(dir.path / "limb2.rigbin"));
    }

    SUBCASE("weight row not summing to 1 names skin_weights") {
        Rig bad = rig;
        bad.skin_weights.weights(0, 0) = 0.9;
        bad.skin_weights.weights.row(0).tail(SkinWeights::kMaxInfluences - 1).setZero();
        try {
            bad.validate();
            FAIL("expected RigFormatError");
        } catch (const RigFormatError& e) {
            CHECK(e.field() == "skin_weights");
        }
    }

    SUBCASE("joint cycle names joints") {
        Rig bad = rig;
        bad.joints[1].parent = 2;
        bad.joints[2].parent = 1;
        try {
            bad.validate();
            FAIL("expected RigFormatError");
        } catch (const RigFormatError& e) {
            CHECK(e.field() == "joints");
        }
    }

    SUBCASE("degenerate face is rejected") {
        Rig bad = rig;
        bad.faces(0, 1) = bad.faces(0, 0);
        try {
            bad.validate();
            FAIL("expected RigFormatError");
        } catch (const RigFormatError& e) {
            CHECK(e.field() == "faces");
        }
    }

    SUBCASE("parse failure is a RigFormatError") {
        write_text_file_atomic(dir.path / "broken.rigjson", "{not json");
        CHECK_THROWS_AS(load_rig(dir.path / "broken.rigjson"), RigFormatError);
    }
}
