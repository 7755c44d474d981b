#pragma once

#include <cmath>

#include "ngs/camera.hpp"
#include "ngs/core.hpp"
#include "ngs/scene.hpp"

namespace ngs {

// Real SH constants, degree 0..3, with the signs folded in as used by common
// Gaussian-splat scene dumps so coefficient files are interchangeable.
inline constexpr double kSH0 = 0.28209479177387814;
inline constexpr double kSH1 = 0.4886025119029199;
inline constexpr double kSH2[5] = {1.0925484305920792, -1.0925484305920792,
                                   0.31539156525252005, -1.0925484305920792,
                                   0.5462742152960396};
inline constexpr double kSH3[7] = {-0.5900435899266435, 2.890611442640554,
                                   -0.4570457994644658, 0.3731763325901154,
                                   -0.4570457994644658, 1.445305721320277,
                                   -0.5900435899266435};

inline constexpr double kColorOffset = 0.5;

inline int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

struct ShBasis {
    Eigen::Matrix<double, 16, 1> values = Eigen::Matrix<double, 16, 1>::Zero();
    Eigen::Matrix<double, 16, 3> jacobian = Eigen::Matrix<double, 16, 3>::Zero();
    std::array<Mat3, 16> hessian{};  // hessian[i] = d2 Phi_i / dr^2
};

/// Evaluate the 16 real SH basis polynomials and their first two derivative
/// orders at a unit direction. Entries above `degree` stay zero.
inline ShBasis eval_sh_basis(const Vec3& r, int degree) {
    if (degree < 0 || degree > 3) throw InvalidInput("eval_sh_basis: degree must be in 0..3");
    if (std::abs(r.norm() - 1.0) > 1e-6) {
        throw InvalidInput("eval_sh_basis: direction must be unit length");
    }
    const double x = r.x(), y = r.y(), z = r.z();
    ShBasis b;
    for (auto& h : b.hessian) h.setZero();

    b.values[0] = kSH0;
    if (degree < 1) return b;

    b.values[1] = -kSH1 * y;
    b.values[2] = kSH1 * z;
    b.values[3] = -kSH1 * x;
    b.jacobian.row(1) = Vec3(0, -kSH1, 0).transpose();
    b.jacobian.row(2) = Vec3(0, 0, kSH1).transpose();
    b.jacobian.row(3) = Vec3(-kSH1, 0, 0).transpose();
    if (degree < 2) return b;

    const double xx = x * x, yy = y * y, zz = z * z;
    b.values[4] = kSH2[0] * x * y;
    b.values[5] = kSH2[1] * y * z;
    b.values[6] = kSH2[2] * (2 * zz - xx - yy);
    b.values[7] = kSH2[3] * x * z;
    b.values[8] = kSH2[4] * (xx - yy);
    b.jacobian.row(4) = kSH2[0] * Vec3(y, x, 0).transpose();
    b.jacobian.row(5) = kSH2[1] * Vec3(0, z, y).transpose();
    b.jacobian.row(6) = kSH2[2] * Vec3(-2 * x, -2 * y, 4 * z).transpose();
    b.jacobian.row(7) = kSH2[3] * Vec3(z, 0, x).transpose();
    b.jacobian.row(8) = kSH2[4] * Vec3(2 * x, -2 * y, 0).transpose();
    b.hessian[4] << 0, kSH2[0], 0, kSH2[0], 0, 0, 0, 0, 0;
    b.hessian[5] << 0, 0, 0, 0, 0, kSH2[1], 0, kSH2[1], 0;
    b.hessian[6] = kSH2[2] * Vec3(-2, -2, 4).asDiagonal();
    b.hessian[7] << 0, 0, kSH2[3], 0, 0, 0, kSH2[3], 0, 0;
    b.hessian[8] = kSH2[4] * Vec3(2, -2, 0).asDiagonal();
    if (degree < 3) return b;

    b.values[9] = kSH3[0] * y * (3 * xx - yy);
    b.values[10] = kSH3[1] * x * y * z;
    b.values[11] = kSH3[2] * y * (4 * zz - xx - yy);
    b.values[12] = kSH3[3] * z * (2 * zz - 3 * xx - 3 * yy);
    b.values[13] = kSH3[4] * x * (4 * zz - xx - yy);
    b.values[14] = kSH3[5] * z * (xx - yy);
    b.values[15] = kSH3[6] * x * (xx - 3 * yy);
    b.jacobian.row(9) = kSH3[0] * Vec3(6 * x * y, 3 * xx - 3 * yy, 0).transpose();
    b.jacobian.row(10) = kSH3[1] * Vec3(y * z, x * z, x * y).transpose();
    b.jacobian.row(11) =
        kSH3[2] * Vec3(-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z).transpose();
    b.jacobian.row(12) =
        kSH3[3] * Vec3(-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy).transpose();
    b.jacobian.row(13) =
        kSH3[4] * Vec3(4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z).transpose();
    b.jacobian.row(14) = kSH3[5] * Vec3(2 * x * z, -2 * y * z, xx - yy).transpose();
    b.jacobian.row(15) = kSH3[6] * Vec3(3 * xx - 3 * yy, -6 * x * y, 0).transpose();
    b.hessian[9] << 6 * y, 6 * x, 0, 6 * x, -6 * y, 0, 0, 0, 0;
    b.hessian[9] *= kSH3[0];
    b.hessian[10] << 0, z, y, z, 0, x, y, x, 0;
    b.hessian[10] *= kSH3[1];
    b.hessian[11] << -2 * y, -2 * x, 0, -2 * x, -6 * y, 8 * z, 0, 8 * z, 8 * y;
    b.hessian[11] *= kSH3[2];
    b.hessian[12] << -6 * z, 0, -6 * x, 0, -6 * z, -6 * y, -6 * x, -6 * y, 12 * z;
    b.hessian[12] *= kSH3[3];
    b.hessian[13] << -6 * x, -2 * y, 8 * z, -2 * y, -2 * x, 0, 8 * z, 0, 8 * x;
    b.hessian[13] *= kSH3[4];
    b.hessian[14] << 2 * z, 0, 2 * x, 0, -2 * z, -2 * y, 2 * x, -2 * y, 0;
    b.hessian[14] *= kSH3[5];
    b.hessian[15] << 6 * x, -6 * y, 0, -6 * y, -6 * x, 0, 0, 0, 0;
    b.hessian[15] *= kSH3[6];
    return b;
}

struct ViewColor {
    Vec3 value = Vec3::Zero();
    std::array<bool, 3> clamped{false, false, false};
};

/// View-dependent color: Phi . c + 0.5 per channel, clamped below at zero.
/// The clamp subgradient is zero whenever the clamp is active.
inline ViewColor eval_view_color(const ShBasis& basis,
                                 const std::array<Eigen::Matrix<double, 16, 1>, 3>& sh) {
    ViewColor out;
    for (int ch = 0; ch < 3; ++ch) {
        const double v = basis.values.dot(sh[ch]) + kColorOffset;
        out.clamped[ch] = v <= 0.0;
        out.value[ch] = out.clamped[ch] ? 0.0 : v;
    }
    return out;
}

struct ShColorDerivs {
    Vec3 value = Vec3::Zero();
    std::array<bool, 3> clamped{false, false, false};
    Mat3 jac = Mat3::Zero();         // jac(ch, j) = d c~_ch / dp_j
    TensorStack<Mat3, 3> hess{};     // hess[ch] = d2 c~_ch / dp^2
};

/// Chain the SH basis through r(p): first and second derivatives of the
/// view-dependent color w.r.t. the kernel center.
inline ShColorDerivs sh_color_derivs_wrt_position(const Camera& camera,
                                                  const GaussianKernel& kernel,
                                                  int degree) {
    const ViewDirDerivs vd = view_direction_derivatives(camera, kernel.position);
    const ShBasis basis = eval_sh_basis(vd.r, degree);
    ShColorDerivs out;
    for (auto& h : out.hess) h.setZero();
    const int n = sh_coeff_count(degree);
    for (int ch = 0; ch < 3; ++ch) {
        const auto& c = kernel.sh[ch];
        const double v = basis.values.dot(c) + kColorOffset;
        out.clamped[ch] = v <= 0.0;
        out.value[ch] = out.clamped[ch] ? 0.0 : v;
        if (out.clamped[ch]) continue;

        Vec3 grad_r = Vec3::Zero();   // d c~ / dr
        Mat3 hess_r = Mat3::Zero();   // d2 c~ / dr^2
        for (int i = 0; i < n; ++i) {
            grad_r += c[i] * basis.jacobian.row(i).transpose();
            hess_r += c[i] * basis.hessian[i];
        }
        out.jac.row(ch) = (vd.jac.transpose() * grad_r).transpose();
        Mat3 h = vd.jac.transpose() * hess_r * vd.jac;
        for (int a = 0; a < 3; ++a) h += grad_r[a] * vd.hess[a];
        out.hess[ch] = h;
    }
    return out;
}

}  // namespace ngs
