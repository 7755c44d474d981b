#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ngs/fd.hpp"
#include "ngs/sh.hpp"
#include "test_util.hpp"

using namespace ngs;

namespace {

Vec3 random_unit(Rng& rng) {
    Vec3 v(rng.normal(), rng.normal(), rng.normal());
    while (v.norm() < 1e-3) v = Vec3(rng.normal(), rng.normal(), rng.normal());
    return v.normalized();
}

}  // namespace

TEST_CASE("degree 0 basis is constant with zero derivatives") {
    Rng rng(1);
    for (int i = 0; i < 10; ++i) {
        const ShBasis b = eval_sh_basis(random_unit(rng), 0);
        CHECK(b.values[0] == doctest::Approx(kSH0));
        CHECK(b.values.tail<15>().norm() == 0.0);
        CHECK(b.jacobian.norm() == 0.0);
    }
}

TEST_CASE("degree 1 pattern at r = +z") {
    const ShBasis b = eval_sh_basis(Vec3(0, 0, 1), 1);
    // Band-1 entries follow the (-y, z, -x) sign pattern.
    CHECK(b.values[1] == 0.0);
    CHECK(b.values[2] == doctest::Approx(kSH1));
    CHECK(b.values[3] == 0.0);
    CHECK(b.values.tail<12>().norm() == 0.0);
}

TEST_CASE("basis rejects non-unit directions and bad degrees") {
    CHECK_THROWS_AS(eval_sh_basis(Vec3(0, 0, 1.1), 2), InvalidInput);
    CHECK_THROWS_AS(eval_sh_basis(Vec3(0, 0, 1), 4), InvalidInput);
}

TEST_CASE("basis jacobian and hessian match cascaded finite differences") {
    Rng rng(5);
    const double h = 5e-7;  // keeps r within the unit-norm tolerance band
    for (int trial = 0; trial < 20; ++trial) {
        const Vec3 r = random_unit(rng);
        const ShBasis b = eval_sh_basis(r, 3);
        for (int j = 0; j < 3; ++j) {
            Vec3 dr = Vec3::Zero();
            dr[j] = h;
            const ShBasis bp = eval_sh_basis(r + dr, 3);
            const ShBasis bm = eval_sh_basis(r - dr, 3);
            for (int i = 0; i < 16; ++i) {
                const double fd_val = (bp.values[i] - bm.values[i]) / (2 * h);
                CHECK(fd::rel_error(b.jacobian(i, j), fd_val, 1e-7) < 1e-5);
                for (int k = 0; k < 3; ++k) {
                    const double fd_hess = (bp.jacobian(i, k) - bm.jacobian(i, k)) / (2 * h);
                    CHECK(fd::rel_error(b.hessian[i](k, j), fd_hess, 1e-7) < 1e-5);
                }
            }
        }
    }
}

TEST_CASE("eval_view_color offset, degree-0 and linearity") {
    Rng rng(9);
    const Vec3 r = random_unit(rng);
    const ShBasis b = eval_sh_basis(r, 3);

    std::array<Eigen::Matrix<double, 16, 1>, 3> zero{};
    for (auto& c : zero) c.setZero();
    const ViewColor vc0 = eval_view_color(b, zero);
    CHECK((vc0.value - Vec3(0.5, 0.5, 0.5)).norm() == 0.0);

    std::array<Eigen::Matrix<double, 16, 1>, 3> flat{};
    for (auto& c : flat) c.setZero();
    flat[0][0] = 0.9;
    const Vec3 a = eval_view_color(eval_sh_basis(random_unit(rng), 3), flat).value;
    const Vec3 c = eval_view_color(eval_sh_basis(random_unit(rng), 3), flat).value;
    CHECK((a - c).norm() == 0.0);  // degree-0 color is view independent

    // Linearity in the coefficients, modulo the fixed offset.
    std::array<Eigen::Matrix<double, 16, 1>, 3> c1{}, c2{}, mix{};
    for (int ch = 0; ch < 3; ++ch) {
        for (int i = 0; i < 16; ++i) {
            c1[ch][i] = rng.uniform(-0.1, 0.1);
            c2[ch][i] = rng.uniform(-0.1, 0.1);
            mix[ch][i] = 2.0 * c1[ch][i] + 3.0 * c2[ch][i];
        }
    }
    const Vec3 lhs = eval_view_color(b, mix).value - Vec3::Constant(kColorOffset);
    const Vec3 rhs = 2.0 * (eval_view_color(b, c1).value - Vec3::Constant(kColorOffset)) +
                     3.0 * (eval_view_color(b, c2).value - Vec3::Constant(kColorOffset));
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("clamped channels report zero color and zero derivatives") {
    const Camera cam = testutil::make_test_camera(Vec3(0, 0, -4));
    GaussianKernel k;
    k.position = Vec3(0.1, 0.2, 0.0);
    k.sh[0].setZero();
    k.sh[0][0] = -10.0;  // forces the red channel below zero pre-clamp
    k.sh[1].setZero();
    k.sh[2].setZero();
    const auto d = sh_color_derivs_wrt_position(cam, k, 3);
    CHECK(d.clamped[0]);
    CHECK(d.value[0] == 0.0);
    CHECK(d.jac.row(0).norm() == 0.0);
    CHECK(d.hess[0].norm() == 0.0);
    CHECK_FALSE(d.clamped[1]);
}

TEST_CASE("degree 0 color has zero position derivatives") {
    const Camera cam = testutil::make_test_camera(Vec3(1, 0.5, -3));
    Rng rng(13);
    GaussianKernel k = testutil::random_kernel(rng);
    const auto d = sh_color_derivs_wrt_position(cam, k, 0);
    CHECK(d.jac.norm() == 0.0);
    for (int ch = 0; ch < 3; ++ch) CHECK(d.hess[ch].norm() == 0.0);
}

TEST_CASE("sh color position derivatives match finite differences") {
    const Camera cam = testutil::make_test_camera(Vec3(0.7, -0.9, -3.4));
    Rng rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        GaussianKernel k = testutil::random_kernel(rng);
        const auto d = sh_color_derivs_wrt_position(cam, k, 3);
        const double h = 1e-4 * 3.0;
        for (int j = 0; j < 3; ++j) {
            GaussianKernel kp = k, km = k;
            kp.position[j] += h;
            km.position[j] -= h;
            const auto vp = sh_color_derivs_wrt_position(cam, kp, 3);
            const auto vm = sh_color_derivs_wrt_position(cam, km, 3);
            for (int ch = 0; ch < 3; ++ch) {
                if (d.clamped[ch]) continue;
                const double fd_val = (vp.value[ch] - vm.value[ch]) / (2 * h);
                CHECK(fd::rel_error(d.jac(ch, j), fd_val, 1e-8) < 1e-4);
                for (int l = 0; l < 3; ++l) {
                    const double fd_hess = (vp.jac(ch, l) - vm.jac(ch, l)) / (2 * h);
                    CHECK(fd::rel_error(d.hess[ch](l, j), fd_hess, 1e-7) < 1e-4);
                }
            }
        }
    }
}

TEST_CASE("degree 1 color is invariant under matched rotation of direction and coefficients") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const Vec3 r = random_unit(rng);
        Eigen::Matrix<double, 16, 1> coeffs = Eigen::Matrix<double, 16, 1>::Zero();
        coeffs[0] = rng.uniform(0.2, 0.8);
        for (int i = 1; i < 4; ++i) coeffs[i] = rng.uniform(-0.2, 0.2);

        // Band 1 evaluates to v . r with v = kSH1 * (-c3, -c1, c2).
        const Vec3 v = kSH1 * Vec3(-coeffs[3], -coeffs[1], coeffs[2]);
        const Mat3 rot = quaternion_to_rotation(testutil::random_unit_quaternion(rng));
        const Vec3 r2 = rot * r;
        const Vec3 v2 = rot * v;
        Eigen::Matrix<double, 16, 1> coeffs2 = Eigen::Matrix<double, 16, 1>::Zero();
        coeffs2[0] = coeffs[0];
        coeffs2[1] = -v2.y() / kSH1;
        coeffs2[2] = v2.z() / kSH1;
        coeffs2[3] = -v2.x() / kSH1;

        std::array<Eigen::Matrix<double, 16, 1>, 3> sh1{}, sh2{};
        for (int ch = 0; ch < 3; ++ch) {
            sh1[ch] = coeffs;
            sh2[ch] = coeffs2;
        }
        const Vec3 a = eval_view_color(eval_sh_basis(r, 1), sh1).value;
        const Vec3 b = eval_view_color(eval_sh_basis(r2, 1), sh2).value;
        CHECK((a - b).cwiseAbs().maxCoeff() < 1e-10);
    }
}
