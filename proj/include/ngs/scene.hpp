#pragma once

#include <cmath>
#include <vector>

#include "ngs/core.hpp"

namespace ngs {

inline constexpr double kSigmaMargin = 1e-4;  // opacity stays in (kSigmaMargin, 1 - kSigmaMargin)
inline constexpr int kShCoeffsPerChannel = 16;

/// One anisotropic Gaussian kernel. Quaternion is (w, x, y, z), scale is the
/// per-axis standard deviation in world units, sh holds 3 x 16 coefficients
/// channel-major (R0..R15, G0..G15, B0..B15).
struct GaussianKernel {
    Vec3 position = Vec3::Zero();
    Vec3 scale = Vec3::Ones();
    Vec4 quaternion = Vec4(1, 0, 0, 0);
    double sigma = 0.5;
    std::array<Eigen::Matrix<double, 16, 1>, 3> sh{};
};

struct Scene {
    std::vector<GaussianKernel> kernels;
    Vec3 background = Vec3::Zero();
    int sh_degree = 3;
};

inline Vec4 renormalize_quaternion(const Vec4& q) {
    const double n = q.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
        throw InvalidInput("renormalize_quaternion: zero or non-finite quaternion");
    }
    return q / n;
}

/// Rotation matrix of a unit quaternion (w, x, y, z). Inputs off the unit
/// sphere by more than ~1e-6 are renormalized first.
inline Mat3 quaternion_to_rotation(const Vec4& q_in) {
    Vec4 q = q_in;
    const double n = q.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
        throw InvalidInput("quaternion_to_rotation: zero quaternion");
    }
    if (std::abs(n - 1.0) > 1e-12) q /= n;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

/// A = R S S^T R^T. Symmetric PSD with eigenvalues {s^2}.
inline Mat3 build_covariance_3d(const Vec4& q, const Vec3& s) {
    if (!(s.minCoeff() > 0.0)) {
        throw InvalidInput("build_covariance_3d: scale components must be positive");
    }
    const Mat3 r = quaternion_to_rotation(q);
    const Mat3 rs = r * s.asDiagonal();
    return rs * rs.transpose();
}

/// Hamilton product a * b, both (w, x, y, z).
inline Vec4 quaternion_multiply(const Vec4& a, const Vec4& b) {
    return Vec4(
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
}

/// Rotation about `axis` (unit) encoded as (cos(theta), sin(theta) * axis).
/// The induced rotation matrix turns by 2*theta around the axis.
inline Vec4 axis_rotation_quaternion(double theta, const Vec3& axis) {
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    return Vec4(c, s * axis.x(), s * axis.y(), s * axis.z());
}

inline void validate_kernel(const GaussianKernel& k) {
    if (std::abs(k.quaternion.norm() - 1.0) > 1e-6) {
        throw InvalidInput("kernel quaternion is not unit length");
    }
    if (!(k.scale.minCoeff() > 0.0)) {
        throw InvalidInput("kernel scale must be positive");
    }
    if (!(k.sigma > kSigmaMargin) || !(k.sigma < 1.0 - kSigmaMargin)) {
        throw InvalidInput("kernel opacity must lie inside (1e-4, 1 - 1e-4)");
    }
}

inline void validate_scene(const Scene& scene) {
    if (scene.sh_degree < 0 || scene.sh_degree > 3) {
        throw InvalidInput("sh_degree must be in 0..3");
    }
    if (scene.background.minCoeff() < 0.0 || scene.background.maxCoeff() > 1.0) {
        throw InvalidInput("background channels must lie in [0,1]");
    }
    for (const auto& k : scene.kernels) validate_kernel(k);
}

}  // namespace ngs
