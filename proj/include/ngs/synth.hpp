#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "ngs/camera.hpp"
#include "ngs/core.hpp"
#include "ngs/rasterizer.hpp"
#include "ngs/scene.hpp"
#include "ngs/scene_io.hpp"
#include "ngs/secondary.hpp"

namespace ngs {

enum class CameraLayout { sphere, ring };

struct SynthParams {
    std::uint64_t seed = 0;
    int kernels = 100;
    int views = 8;          // training views
    int probe_views = 4;    // held-out probe views
    int width = 64;
    int height = 64;
    CameraLayout layout = CameraLayout::sphere;
    double camera_radius = 2.0;
    double fov_deg = 60.0;
    double perturbation = 1.0;  // 0 disables the training-init jitter
    int sh_degree = 3;
    int secondary_downsample = 4;  // factor for the exact low-res ground truth
    // Kernel footprints stay a few pixels wide and spread through the whole
    // ball, keeping the per-pixel splat stacks shallow. The local solves rely
    // on that weak coupling; deep stacks turn the parallel per-kernel commits
    // into an amplifying loop.
    double kernel_scale_min = 0.05;
    double kernel_scale_max = 0.12;
    double position_radius = 1.0;
    double sigma_min = 0.35;
    double sigma_max = 0.7;
};

struct SynthResult {
    Scene truth;   // generator scene, renders the ground truth
    Scene init;    // perturbed copy used as the training initialization
    Dataset dataset;
};

namespace detail {

inline Vec3 fibonacci_dir(int i, int n) {
    const double golden = M_PI * (3.0 - std::sqrt(5.0));
    // Keep directions away from the exact poles.
    const double y = 1.0 - 2.0 * (i + 0.5) / n;
    const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double phi = golden * i;
    return Vec3(r * std::cos(phi), y, r * std::sin(phi));
}

inline Vec3 ring_dir(double angle) {
    // Slightly elevated ring so the up vector never degenerates.
    const Vec3 d(std::cos(angle), 0.25, std::sin(angle));
    return d.normalized();
}

}  // namespace detail

/// Deterministic synthetic fixture: random kernels inside the unit ball,
/// cameras on a sphere looking at the origin, reference-rendered ground
/// truth and a jittered copy of the scene as training initialization.
inline SynthResult synth_scene(const SynthParams& params) {
    if (params.kernels < 1) throw InvalidInput("synth_scene: need at least one kernel");
    if (params.views < 1) throw InvalidInput("synth_scene: need at least one view");
    Rng rng(params.seed);

    SynthResult out;
    out.truth.sh_degree = params.sh_degree;
    out.truth.background = Vec3(0.05, 0.05, 0.08);
    for (int i = 0; i < params.kernels; ++i) {
        GaussianKernel k;
        // Uniform direction, radius biased toward the shell for coverage.
        Vec3 dir(rng.normal(), rng.normal(), rng.normal());
        if (dir.norm() < 1e-6) dir = Vec3::UnitX();
        dir.normalize();
        k.position = dir * params.position_radius * std::cbrt(rng.uniform());
        k.scale = Vec3(rng.uniform(params.kernel_scale_min, params.kernel_scale_max),
                       rng.uniform(params.kernel_scale_min, params.kernel_scale_max),
                       rng.uniform(params.kernel_scale_min, params.kernel_scale_max));
        k.quaternion = [&] {
            Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
            return q.norm() < 1e-6 ? Vec4(1, 0, 0, 0) : Vec4(q.normalized());
        }();
        k.sigma = rng.uniform(params.sigma_min, params.sigma_max);
        for (int ch = 0; ch < 3; ++ch) {
            k.sh[ch].setZero();
            k.sh[ch][0] = rng.uniform(-0.9, 0.9);
            const int n = sh_coeff_count(params.sh_degree);
            for (int c = 1; c < n; ++c) k.sh[ch][c] = rng.uniform(-0.12, 0.12);
        }
        out.truth.kernels.push_back(std::move(k));
    }

    // Cameras: training views followed by held-out probe views.
    const double fov = params.fov_deg * M_PI / 180.0;
    const double aspect = static_cast<double>(params.width) / params.height;
    const Mat4 proj = make_perspective_proj(fov, aspect, 0.05, 100.0);
    auto add_camera = [&](const Vec3& dir) {
        const Vec3 eye = dir * params.camera_radius;
        out.dataset.cameras.emplace_back(make_lookat_view(eye, Vec3::Zero(), Vec3::UnitY()), proj,
                                         params.width, params.height);
    };
    const int total = params.views + params.probe_views;
    if (params.layout == CameraLayout::sphere) {
        for (int i = 0; i < total; ++i) add_camera(detail::fibonacci_dir(i, total));
    } else {
        for (int i = 0; i < params.views; ++i) {
            add_camera(detail::ring_dir(2.0 * M_PI * i / params.views));
        }
        for (int i = 0; i < params.probe_views; ++i) {
            add_camera(detail::ring_dir(2.0 * M_PI * (i + 0.5) / std::max(1, params.probe_views)));
        }
    }
    for (int i = 0; i < total; ++i) {
        (i < params.views ? out.dataset.train_ids : out.dataset.probe_ids).push_back(i);
    }

    for (const Camera& cam : out.dataset.cameras) {
        out.dataset.targets.push_back(render_reference(out.truth, cam).image);
    }
    if (params.secondary_downsample > 1) {
        out.dataset.secondary_downsample = params.secondary_downsample;
        for (const Camera& cam : out.dataset.cameras) {
            const Camera down = make_downsampled_camera(cam, params.secondary_downsample);
            out.dataset.secondary_targets.push_back(render_reference(out.truth, down).image);
        }
    }

    // Training initialization: jittered copy of the generator scene.
    out.init = out.truth;
    const double p = params.perturbation;
    for (auto& k : out.init.kernels) {
        k.position += p * 0.05 * Vec3(rng.normal(), rng.normal(), rng.normal());
        for (int c = 0; c < 3; ++c) {
            const double factor = std::exp2(rng.uniform(-1.0, 1.0));  // U[0.5, 2]
            k.scale[c] *= std::pow(factor, p);
        }
        k.sigma = std::clamp(k.sigma + p * 0.15 * rng.normal(), 0.05, 0.95);
        for (int ch = 0; ch < 3; ++ch) {
            k.sh[ch][0] += p * 0.25 * rng.normal();
            for (int c = 1; c < 16; ++c) k.sh[ch][c] += p * 0.03 * rng.normal();
        }
    }
    return out;
}

/// Writes scene + dataset files: scene_init.json, scene_truth.json,
/// dataset.json and one ground-truth image per view.
inline void write_synth(const std::string& dir, const SynthResult& synth,
                        const std::string& image_ext = "ppm") {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_scene((fs::path(dir) / "scene_init.json").string(), synth.init);
    save_scene((fs::path(dir) / "scene_truth.json").string(), synth.truth);

    DatasetManifest manifest;
    for (int i = 0; i < static_cast<int>(synth.dataset.cameras.size()); ++i) {
        const Camera& cam = synth.dataset.cameras[i];
        DatasetManifest::Entry e;
        e.view = cam.view;
        e.proj = cam.proj;
        e.width = cam.width;
        e.height = cam.height;
        e.image = "view_" + std::to_string(i) + "." + image_ext;
        write_image((fs::path(dir) / e.image).string(), synth.dataset.targets[i]);
        manifest.cameras.push_back(std::move(e));
    }
    manifest.probe_ids = synth.dataset.probe_ids;
    save_manifest((fs::path(dir) / "dataset.json").string(), manifest);
}

}  // namespace ngs
