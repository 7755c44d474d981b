#pragma once

#include <cmath>
#include <optional>

#include "ngs/core.hpp"
#include "ngs/scene.hpp"

namespace ngs {

inline constexpr double kNearPlaneEps = 1e-6;     // h_w at or below this is culled
inline constexpr double kDefaultLowPass = 0.3;    // pixel^2 added to every 2D covariance

/// Pinhole-style camera described by a homogeneous view matrix (world ->
/// camera) and projection matrix (camera -> clip). Pixels are mapped from NDC
/// [-1,1]^2 by (W/2 (x+1), H/2 (y+1)) with pixel centers at integer + 0.5.
struct Camera {
    Mat4 view = Mat4::Identity();
    Mat4 proj = Mat4::Identity();
    int width = 0;
    int height = 0;

    Mat4 view_proj = Mat4::Identity();     // proj * view
    Mat3 view_rot = Mat3::Identity();      // top-left block of view
    Vec3 view_trans = Vec3::Zero();
    Vec3 center = Vec3::Zero();            // camera position in world space

    Camera() = default;

    Camera(const Mat4& view_in, const Mat4& proj_in, int w, int h)
        : view(view_in), proj(proj_in), width(w), height(h) {
        if (w < 16 || h < 16) {
            throw InvalidInput("camera: width and height must be >= 16");
        }
        view_proj = proj * view;
        view_rot = view.topLeftCorner<3, 3>();
        view_trans = view.topRightCorner<3, 1>();
        if (std::abs(view_rot.determinant()) < 1e-12) {
            throw InvalidInput("camera: view rotation block is singular");
        }
        center = -view_rot.inverse() * view_trans;
    }

    Vec3 to_camera_space(const Vec3& p) const { return view_rot * p + view_trans; }
};

struct ProjectedCenter {
    Vec2 pixel;   // pixel coordinates
    Vec4 h;       // clip-space homogeneous coordinates
    double depth; // camera-space z
};

struct ProjectedKernel {
    Vec2 pixel;
    double depth = 0.0;
    Mat2 cov2d = Mat2::Identity();
    Mat2 cov2d_inv = Mat2::Identity();
    Vec3 view_dir = Vec3::UnitZ();
    Vec4 h = Vec4::Zero();
    Mat23 ewa_jacobian = Mat23::Zero();
};

inline Vec3 view_direction(const Camera& camera, const Vec3& p) {
    const Vec3 u = p - camera.center;
    const double n = u.norm();
    if (!(n > 1e-12)) {
        throw DegenerateGeometry("view_direction: point coincides with camera center");
    }
    return u / n;
}

/// First and second derivatives of the unit vector r(p) = (p - o)/|p - o|.
struct ViewDirDerivs {
    Vec3 r;
    Mat3 jac;                   // dr/dp
    TensorStack<Mat3, 3> hess;  // hess[i](j,k) = d2 r_i / dp_j dp_k
};

inline ViewDirDerivs view_direction_derivatives(const Camera& camera, const Vec3& p) {
    ViewDirDerivs out;
    const Vec3 u = p - camera.center;
    const double n = u.norm();
    if (!(n > 1e-12)) {
        throw DegenerateGeometry("view_direction_derivatives: degenerate geometry");
    }
    const Vec3 r = u / n;
    out.r = r;
    out.jac = (Mat3::Identity() - r * r.transpose()) / n;
    const double inv_n2 = 1.0 / (n * n);
    for (int i = 0; i < 3; ++i) {
        Mat3 h;
        for (int j = 0; j < 3; ++j) {
            for (int k = 0; k < 3; ++k) {
                double v = 3.0 * r[i] * r[j] * r[k];
                if (i == j) v -= r[k];
                if (i == k) v -= r[j];
                if (j == k) v -= r[i];
                h(j, k) = v * inv_n2;
            }
        }
        out.hess[i] = h;
    }
    return out;
}

inline std::optional<ProjectedCenter> project_center(const Camera& camera, const Vec3& p) {
    const Vec4 h = camera.view_proj * Vec4(p.x(), p.y(), p.z(), 1.0);
    if (!(h.w() > kNearPlaneEps)) return std::nullopt;
    ProjectedCenter out;
    out.h = h;
    out.pixel = Vec2(0.5 * camera.width * (h.x() / h.w() + 1.0),
                     0.5 * camera.height * (h.y() / h.w() + 1.0));
    out.depth = camera.view_rot.row(2).dot(p) + camera.view_trans.z();
    return out;
}

struct ProjectionDerivs {
    Mat23 jac;                  // dpi/dp
    TensorStack<Mat3, 2> hess;  // hess[i] = d2 pi_i / dp^2 (symmetric)
};

/// Analytic derivatives of the pixel projection. The Hessian is the full
/// quotient-rule expansion, so each slice is symmetric by construction.
inline std::optional<ProjectionDerivs> projection_derivatives(const Camera& camera,
                                                              const Vec3& p) {
    const Vec4 h = camera.view_proj * Vec4(p.x(), p.y(), p.z(), 1.0);
    if (!(h.w() > kNearPlaneEps)) return std::nullopt;
    const Vec3 a = camera.view_proj.row(0).head<3>();
    const Vec3 b = camera.view_proj.row(1).head<3>();
    const Vec3 w = camera.view_proj.row(3).head<3>();
    const double hw = h.w();
    const double inv_hw = 1.0 / hw;
    const double inv_hw2 = inv_hw * inv_hw;
    const double inv_hw3 = inv_hw2 * inv_hw;
    const double sx = 0.5 * camera.width;
    const double sy = 0.5 * camera.height;

    ProjectionDerivs out;
    out.jac.row(0) = sx * (a * inv_hw - h.x() * inv_hw2 * w).transpose();
    out.jac.row(1) = sy * (b * inv_hw - h.y() * inv_hw2 * w).transpose();

    const Mat3 ww = w * w.transpose();
    out.hess[0] = sx * (-(a * w.transpose() + w * a.transpose()) * inv_hw2 +
                        2.0 * h.x() * ww * inv_hw3);
    out.hess[1] = sy * (-(b * w.transpose() + w * b.transpose()) * inv_hw2 +
                        2.0 * h.y() * ww * inv_hw3);
    return out;
}

namespace detail {

/// Pixel projection of a camera-space point through `proj` alone, plus its
/// first three derivative orders. This is the local map the EWA approximation
/// linearizes; the third order feeds d2Sigma/dp2.
struct CameraSpaceProjection {
    Vec2 pixel;
    double hw = 0.0;
    Mat23 jac;                                      // J = dpi/dt
    TensorStack<Mat23, 3> djac;                     // djac[e] = dJ/dt_e
    std::array<TensorStack<Mat23, 3>, 3> d2jac;     // d2jac[e][f] = d2J/dt_e dt_f
};

inline std::optional<CameraSpaceProjection> project_camera_space(const Camera& camera,
                                                                 const Vec3& t,
                                                                 bool with_second_order) {
    const Vec4 h = camera.proj * Vec4(t.x(), t.y(), t.z(), 1.0);
    if (!(h.w() > kNearPlaneEps)) return std::nullopt;
    const Vec3 a = camera.proj.row(0).head<3>();
    const Vec3 b = camera.proj.row(1).head<3>();
    const Vec3 w = camera.proj.row(3).head<3>();
    const double hw = h.w();
    const double inv_hw = 1.0 / hw;
    const double inv_hw2 = inv_hw * inv_hw;
    const double inv_hw3 = inv_hw2 * inv_hw;
    const double inv_hw4 = inv_hw2 * inv_hw2;
    const double sx = 0.5 * camera.width;
    const double sy = 0.5 * camera.height;

    CameraSpaceProjection out;
    out.hw = hw;
    out.pixel = Vec2(sx * (h.x() * inv_hw + 1.0), sy * (h.y() * inv_hw + 1.0));
    out.jac.row(0) = sx * (a * inv_hw - h.x() * inv_hw2 * w).transpose();
    out.jac.row(1) = sy * (b * inv_hw - h.y() * inv_hw2 * w).transpose();

    for (int e = 0; e < 3; ++e) {
        Mat23 d;
        d.row(0) = sx * (-(w[e] * a + a[e] * w) * inv_hw2 + 2.0 * h.x() * w[e] * inv_hw3 * w)
                       .transpose();
        d.row(1) = sy * (-(w[e] * b + b[e] * w) * inv_hw2 + 2.0 * h.y() * w[e] * inv_hw3 * w)
                       .transpose();
        out.djac[e] = d;
    }
    if (with_second_order) {
        for (int e = 0; e < 3; ++e) {
            for (int f = 0; f < 3; ++f) {
                Mat23 d2;
                d2.row(0) = sx * (2.0 * ((w[e] * a + a[e] * w) * w[f] + a[f] * w[e] * w) * inv_hw3 -
                                  6.0 * h.x() * w[e] * w[f] * inv_hw4 * w)
                                .transpose();
                d2.row(1) = sy * (2.0 * ((w[e] * b + b[e] * w) * w[f] + b[f] * w[e] * w) * inv_hw3 -
                                  6.0 * h.y() * w[e] * w[f] * inv_hw4 * w)
                                .transpose();
                out.d2jac[e][f] = d2;
            }
        }
    }
    return out;
}

}  // namespace detail

struct Cov2d {
    Mat2 sigma;        // low-pass regularized, PSD
    Mat23 jac;         // EWA Jacobian J at the kernel center
};

/// EWA projection Sigma = J W3 A W3^T J^T + lambda_lp I of a kernel's 3D
/// covariance onto the image plane.
inline std::optional<Cov2d> project_covariance_2d(const Camera& camera,
                                                  const GaussianKernel& kernel,
                                                  double lambda_lp = kDefaultLowPass) {
    const Vec3 t = camera.to_camera_space(kernel.position);
    const auto proj = detail::project_camera_space(camera, t, false);
    if (!proj) return std::nullopt;
    const Mat3 a3d = build_covariance_3d(kernel.quaternion, kernel.scale);
    const Mat3 m = camera.view_rot * a3d * camera.view_rot.transpose();
    Cov2d out;
    out.jac = proj->jac;
    out.sigma = proj->jac * m * proj->jac.transpose() + lambda_lp * Mat2::Identity();
    out.sigma = 0.5 * (out.sigma + out.sigma.transpose());
    return out;
}

struct Cov2dPositionDerivs {
    TensorStack<Mat2, 3> jac;                      // jac[c] = dSigma/dp_c
    std::array<TensorStack<Mat2, 3>, 3> hess;      // hess[c][d] = d2Sigma/dp_c dp_d
};

/// Derivatives of the projected covariance w.r.t. the kernel center. Sigma
/// depends on position only through the EWA Jacobian.
inline std::optional<Cov2dPositionDerivs> cov2d_derivatives_wrt_position(
    const Camera& camera, const GaussianKernel& kernel) {
    const Vec3 t = camera.to_camera_space(kernel.position);
    const auto proj = detail::project_camera_space(camera, t, true);
    if (!proj) return std::nullopt;
    const Mat3 a3d = build_covariance_3d(kernel.quaternion, kernel.scale);
    const Mat3 m = camera.view_rot * a3d * camera.view_rot.transpose();
    const Mat23& j = proj->jac;
    const Mat32 mjt = m * j.transpose();

    // Chain through t = W3 p + t_w.
    TensorStack<Mat23, 3> dj_dp;
    std::array<TensorStack<Mat23, 3>, 3> d2j_dp2;
    for (int c = 0; c < 3; ++c) {
        Mat23 d = Mat23::Zero();
        for (int e = 0; e < 3; ++e) d += proj->djac[e] * camera.view_rot(e, c);
        dj_dp[c] = d;
    }
    for (int c = 0; c < 3; ++c) {
        for (int d = 0; d < 3; ++d) {
            Mat23 d2 = Mat23::Zero();
            for (int e = 0; e < 3; ++e) {
                for (int f = 0; f < 3; ++f) {
                    d2 += proj->d2jac[e][f] * (camera.view_rot(e, c) * camera.view_rot(f, d));
                }
            }
            d2j_dp2[c][d] = d2;
        }
    }

    Cov2dPositionDerivs out;
    for (int c = 0; c < 3; ++c) {
        const Mat2 term = dj_dp[c] * mjt;
        out.jac[c] = term + term.transpose();
    }
    for (int c = 0; c < 3; ++c) {
        for (int d = 0; d < 3; ++d) {
            const Mat2 t1 = d2j_dp2[c][d] * mjt;
            const Mat2 t2 = dj_dp[c] * m * dj_dp[d].transpose();
            out.hess[c][d] = t1 + t1.transpose() + t2 + t2.transpose();
        }
    }
    return out;
}

/// World -> camera rigid transform looking from `eye` toward `target`;
/// camera-space z points at the target.
inline Mat4 make_lookat_view(const Vec3& eye, const Vec3& target, const Vec3& up_hint) {
    const Vec3 fwd = (target - eye).normalized();
    Vec3 up = up_hint;
    if (std::abs(fwd.dot(up.normalized())) > 0.999) {
        up = std::abs(fwd.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitX();
    }
    const Vec3 right = up.cross(fwd).normalized();
    const Vec3 down = fwd.cross(right);  // completes a right-handed frame
    Mat4 view = Mat4::Identity();
    view.row(0).head<3>() = right.transpose();
    view.row(1).head<3>() = down.transpose();
    view.row(2).head<3>() = fwd.transpose();
    view(0, 3) = -right.dot(eye);
    view(1, 3) = -down.dot(eye);
    view(2, 3) = -fwd.dot(eye);
    return view;
}

/// Symmetric perspective projection with h_w = camera-space z.
inline Mat4 make_perspective_proj(double fov_y_rad, double aspect, double z_near, double z_far) {
    const double fy = 1.0 / std::tan(0.5 * fov_y_rad);
    const double fx = fy / aspect;
    Mat4 proj = Mat4::Zero();
    proj(0, 0) = fx;
    proj(1, 1) = fy;
    proj(2, 2) = (z_far + z_near) / (z_far - z_near);
    proj(2, 3) = -2.0 * z_far * z_near / (z_far - z_near);
    proj(3, 2) = 1.0;
    return proj;
}

inline std::optional<ProjectedKernel> project_kernel(const Camera& camera,
                                                     const GaussianKernel& kernel,
                                                     double lambda_lp = kDefaultLowPass) {
    const auto center = project_center(camera, kernel.position);
    if (!center) return std::nullopt;
    const auto cov = project_covariance_2d(camera, kernel, lambda_lp);
    if (!cov) return std::nullopt;
    ProjectedKernel out;
    out.pixel = center->pixel;
    out.depth = center->depth;
    out.h = center->h;
    out.cov2d = cov->sigma;
    const double det = out.cov2d.determinant();
    if (!(det > 0.0)) {
        throw NumericalError("project_kernel: projected covariance is not positive definite");
    }
    out.cov2d_inv = out.cov2d.inverse();
    out.ewa_jacobian = cov->jac;
    out.view_dir = view_direction(camera, kernel.position);
    return out;
}

}  // namespace ngs
