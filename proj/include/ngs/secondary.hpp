#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ngs/camera.hpp"
#include "ngs/core.hpp"
#include "ngs/image.hpp"
#include "ngs/scene.hpp"

namespace ngs {

inline constexpr int kDefaultKnn = 3;
inline constexpr int kDefaultSecondaryDownsample = 4;

/// Bounding sphere of the kernel positions; camera poses are projected onto
/// its surface to measure view proximity.
struct CameraSphere {
    Vec3 center = Vec3::Zero();
    double radius = 1.0;
};

inline CameraSphere fit_bounding_sphere(const Scene& scene) {
    if (scene.kernels.empty()) throw InvalidInput("fit_bounding_sphere: empty scene");
    CameraSphere sphere;
    Vec3 acc = Vec3::Zero();
    for (const auto& k : scene.kernels) acc += k.position;
    sphere.center = acc / static_cast<double>(scene.kernels.size());
    double max_dist = 0.0;
    for (const auto& k : scene.kernels) {
        max_dist = std::max(max_dist, (k.position - sphere.center).norm());
    }
    sphere.radius = max_dist > 0.0 ? 1.05 * max_dist : 1.0;
    return sphere;
}

inline Vec3 sphere_direction(const CameraSphere& sphere, const Camera& camera) {
    const Vec3 d = camera.center - sphere.center;
    const double n = d.norm();
    if (!(n > 1e-12)) {
        throw DegenerateGeometry("sphere_direction: camera at the sphere center");
    }
    return d / n;
}

/// Great-circle distance between the sphere projections of two camera poses.
inline double spherical_distance(const CameraSphere& sphere, const Camera& a, const Camera& b) {
    const double d = std::clamp(sphere_direction(sphere, a).dot(sphere_direction(sphere, b)),
                                -1.0, 1.0);
    return sphere.radius * std::acos(d);
}

/// K nearest views per view under the spherical metric. Neighbor lists hold
/// indices into `cameras`; ties break toward the smaller view id.
struct SecondaryTargetSet {
    int k = 0;
    std::vector<std::vector<int>> neighbors;
};

inline SecondaryTargetSet knn_views(const std::vector<Camera>& cameras, const CameraSphere& sphere,
                                    int k) {
    SecondaryTargetSet out;
    out.k = k;
    const int n = static_cast<int>(cameras.size());
    out.neighbors.resize(n);
    if (k <= 0 || n < 2) return out;
    for (int t = 0; t < n; ++t) {
        std::vector<std::pair<double, int>> dist;
        dist.reserve(n - 1);
        for (int j = 0; j < n; ++j) {
            if (j == t) continue;
            dist.emplace_back(spherical_distance(sphere, cameras[t], cameras[j]), j);
        }
        std::sort(dist.begin(), dist.end());
        const int take = std::min<int>(k, static_cast<int>(dist.size()));
        out.neighbors[t].reserve(take);
        for (int i = 0; i < take; ++i) out.neighbors[t].push_back(dist[i].second);
    }
    return out;
}

/// Secondary views render at a reduced resolution; the factor is clamped so
/// the viewport stays at least 16 pixels on each side.
inline int clamp_downsample_factor(const Camera& camera, int factor) {
    int f = std::max(1, factor);
    while (f > 1 && (camera.width / f < 16 || camera.height / f < 16)) --f;
    return f;
}

inline Camera make_downsampled_camera(const Camera& camera, int factor) {
    const int f = clamp_downsample_factor(camera, factor);
    return Camera(camera.view, camera.proj, camera.width / f, camera.height / f);
}

}  // namespace ngs
