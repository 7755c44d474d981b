#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "ngs/camera.hpp"
#include "ngs/core.hpp"
#include "ngs/fd.hpp"
#include "ngs/loss.hpp"
#include "ngs/newton.hpp"
#include "ngs/rasterizer.hpp"
#include "ngs/scene.hpp"
#include "ngs/sh.hpp"

namespace ngs {

struct CheckItem {
    std::string name;
    double max_rel_err = 0.0;
    double tolerance = 1e-4;
    int samples = 0;
    bool pass = true;
};

struct CheckReport {
    std::vector<CheckItem> items;
    bool all_pass = true;
    double seconds = 0.0;

    const CheckItem* find(const std::string& name) const {
        for (const auto& item : items) {
            if (item.name == name) return &item;
        }
        return nullptr;
    }
};

struct CheckOptions {
    double tolerance = 1e-4;
    double ssim_hess_tolerance = 1e-3;
    int sampled_kernels = 6;
    int sampled_pixels = 8;
    LossConfig loss;  // lambda 0.2 exercises both loss terms

    /// Test hook: the named quantity's analytic values are sign-flipped
    /// before comparison, so the harness must flag exactly that entry.
    std::string corrupt_quantity;
};

namespace detail {

/// Central difference with a half-step probe; falls back to Richardson
/// extrapolation when the two step sizes disagree.
template <typename Fn>
double fd_adaptive(Fn&& value_at_offset, double h) {
    const double d1 = (value_at_offset(h) - value_at_offset(-h)) / (2.0 * h);
    const double d2 = (value_at_offset(0.5 * h) - value_at_offset(-0.5 * h)) / h;
    if (fd::rel_error(d1, d2, 1e-12) > 1e-6) return (4.0 * d2 - d1) / 3.0;
    return d2;
}

struct QuantityCheck {
    CheckItem item;
    double flip = 1.0;

    QuantityCheck(std::string name, double tolerance, const CheckOptions& options) {
        item.name = std::move(name);
        item.tolerance = tolerance;
        if (options.corrupt_quantity == item.name) flip = -1.0;
    }

    void record(double analytic, double reference, double floor = 1e-9) {
        const double err = fd::rel_error(flip * analytic, reference, floor);
        item.max_rel_err = std::max(item.max_rel_err, err);
        ++item.samples;
    }

    void finish(CheckReport& report) {
        item.pass = item.max_rel_err <= item.tolerance;
        report.all_pass = report.all_pass && item.pass;
        report.items.push_back(item);
    }
};

}  // namespace detail

/// A randomized desk-scale fixture for the derivative gate: <= 50 kernels,
/// 48x48, SH degree 3, target rendered from a jittered copy of the scene.
/// Coefficients stay mild so the color clamp never activates and the loss is
/// smooth around the evaluation point.
struct CheckFixture {
    Scene scene;
    Camera camera;
    Image target;
};

inline CheckFixture make_check_fixture(std::uint64_t seed) {
    Rng rng(seed);
    CheckFixture f;
    f.scene.sh_degree = 3;
    f.scene.background = Vec3(0.08, 0.06, 0.1);
    const int kernels = 10 + static_cast<int>(rng.next() % 41);  // 10..50
    for (int i = 0; i < kernels; ++i) {
        GaussianKernel k;
        k.position =
            Vec3(rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8));
        k.scale = Vec3(rng.uniform(0.05, 0.15), rng.uniform(0.05, 0.15), rng.uniform(0.05, 0.15));
        Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        k.quaternion = q.norm() < 1e-6 ? Vec4(1, 0, 0, 0) : Vec4(q.normalized());
        k.sigma = rng.uniform(0.3, 0.9);
        for (int ch = 0; ch < 3; ++ch) {
            k.sh[ch].setZero();
            k.sh[ch][0] = rng.uniform(-0.8, 0.8);
            for (int c = 1; c < 16; ++c) k.sh[ch][c] = rng.uniform(-0.03, 0.03);
        }
        f.scene.kernels.push_back(std::move(k));
    }
    const Vec3 eye =
        Vec3(rng.uniform(-1, 1), rng.uniform(-0.6, 0.6), rng.uniform(-1, 1)).normalized() * 3.2;
    f.camera = Camera(make_lookat_view(eye, Vec3::Zero(), Vec3::UnitY()),
                      make_perspective_proj(M_PI / 3.0, 1.0, 0.05, 100.0), 48, 48);
    Scene truth = f.scene;
    for (auto& k : truth.kernels) {
        k.position += 0.02 * Vec3(rng.normal(), rng.normal(), rng.normal());
        k.sigma = std::clamp(k.sigma + rng.uniform(-0.1, 0.1), 0.05, 0.95);
    }
    f.target = render_reference(truth, f.camera).image;
    return f;
}

/// Central-difference audit of every analytic derivative in the pipeline:
/// projection, projected covariance, SH basis and color, Gaussian weight,
/// loss fields and the five assembled solve gradients.
inline CheckReport check_derivatives(const Scene& scene, const Camera& camera, const Image& target,
                                     const CheckOptions& options = {}) {
    using detail::QuantityCheck;
    const auto t_start = std::chrono::steady_clock::now();
    CheckReport report;
    const double tol = options.tolerance;

    Rng rng(12345);
    std::vector<int> kernel_ids;
    for (int k = 0; k < static_cast<int>(scene.kernels.size()) &&
                    static_cast<int>(kernel_ids.size()) < options.sampled_kernels;
         ++k) {
        kernel_ids.push_back(k);
    }

    const LossConfig& loss_config = options.loss;
    auto rendered_loss = [&](const Scene& s, const Cov2dOverride* cov = nullptr) {
        const Image img = render_reference(s, camera, kDefaultLowPass, false, cov).image;
        return total_loss_value(img, target, loss_config);
    };

    // --- camera_projection ---------------------------------------------
    {
        QuantityCheck jac("projection_jacobian", tol, options);
        QuantityCheck hess("projection_hessian", tol, options);
        for (int k : kernel_ids) {
            const Vec3 p = scene.kernels[k].position;
            const auto d = projection_derivatives(camera, p);
            if (!d) continue;
            const double h = 1e-4 * 3.0;
            for (int j = 0; j < 3; ++j) {
                for (int i = 0; i < 2; ++i) {
                    const double fd_v = detail::fd_adaptive(
                        [&](double off) {
                            Vec3 q = p;
                            q[j] += off;
                            return project_center(camera, q)->pixel[i];
                        },
                        h);
                    jac.record(d->jac(i, j), fd_v, 1e-6);
                    for (int l = 0; l < 3; ++l) {
                        const double fd_h = detail::fd_adaptive(
                            [&](double off) {
                                Vec3 q = p;
                                q[j] += off;
                                return projection_derivatives(camera, q)->jac(i, l);
                            },
                            h);
                        hess.record(d->hess[i](l, j), fd_h, 1e-6);
                    }
                }
            }
        }
        jac.finish(report);
        hess.finish(report);
    }

    {
        QuantityCheck jac("cov2d_jacobian", tol, options);
        QuantityCheck hess("cov2d_hessian", tol, options);
        for (int k : kernel_ids) {
            const GaussianKernel& kernel = scene.kernels[k];
            const auto d = cov2d_derivatives_wrt_position(camera, kernel);
            if (!d) continue;
            const double h = 3e-4;
            for (int c = 0; c < 3; ++c) {
                for (int i = 0; i < 2; ++i) {
                    for (int j = i; j < 2; ++j) {
                        const double fd_v = detail::fd_adaptive(
                            [&](double off) {
                                GaussianKernel kk = kernel;
                                kk.position[c] += off;
                                return project_covariance_2d(camera, kk)->sigma(i, j);
                            },
                            h);
                        jac.record(d->jac[c](i, j), fd_v, 1e-7);
                        for (int e = 0; e < 3; ++e) {
                            const double fd_h = detail::fd_adaptive(
                                [&](double off) {
                                    GaussianKernel kk = kernel;
                                    kk.position[c] += off;
                                    return cov2d_derivatives_wrt_position(camera, kk)
                                        ->jac[e](i, j);
                                },
                                h);
                            hess.record(d->hess[e][c](i, j), fd_h, 1e-6);
                        }
                    }
                }
            }
        }
        jac.finish(report);
        hess.finish(report);
    }

    // --- sh_color ---------------------------------------------------------
    {
        QuantityCheck jac("sh_basis_jacobian", 1e-5, options);
        QuantityCheck hess("sh_basis_hessian", 1e-5, options);
        const double h = 5e-7;  // stays inside the unit-norm tolerance band
        for (int trial = 0; trial < 6; ++trial) {
            Vec3 r(rng.normal(), rng.normal(), rng.normal());
            if (r.norm() < 1e-3) continue;
            r.normalize();
            const ShBasis b = eval_sh_basis(r, 3);
            for (int j = 0; j < 3; ++j) {
                for (int i = 0; i < 16; ++i) {
                    const double fd_v = detail::fd_adaptive(
                        [&](double off) {
                            Vec3 q = r;
                            q[j] += off;
                            return eval_sh_basis(q, 3).values[i];
                        },
                        h);
                    jac.record(b.jacobian(i, j), fd_v, 1e-7);
                    for (int l = 0; l < 3; ++l) {
                        const double fd_h = detail::fd_adaptive(
                            [&](double off) {
                                Vec3 q = r;
                                q[j] += off;
                                return eval_sh_basis(q, 3).jacobian(i, l);
                            },
                            h);
                        hess.record(b.hessian[i](l, j), fd_h, 1e-7);
                    }
                }
            }
        }
        jac.finish(report);
        hess.finish(report);
    }

    {
        QuantityCheck grad("sh_color_grad", tol, options);
        QuantityCheck hess("sh_color_hessian", tol, options);
        for (int k : kernel_ids) {
            const GaussianKernel& kernel = scene.kernels[k];
            const auto d = sh_color_derivs_wrt_position(camera, kernel, scene.sh_degree);
            const double h = 3e-4;
            for (int ch = 0; ch < 3; ++ch) {
                if (d.clamped[ch]) continue;
                for (int j = 0; j < 3; ++j) {
                    const double fd_v = detail::fd_adaptive(
                        [&](double off) {
                            GaussianKernel kk = kernel;
                            kk.position[j] += off;
                            return sh_color_derivs_wrt_position(camera, kk, scene.sh_degree)
                                .value[ch];
                        },
                        h);
                    grad.record(d.jac(ch, j), fd_v, 1e-8);
                    for (int l = 0; l < 3; ++l) {
                        const double fd_h = detail::fd_adaptive(
                            [&](double off) {
                                GaussianKernel kk = kernel;
                                kk.position[j] += off;
                                return sh_color_derivs_wrt_position(camera, kk, scene.sh_degree)
                                    .jac(ch, l);
                            },
                            h);
                        hess.record(d.hess[ch](l, j), fd_h, 1e-7);
                    }
                }
            }
        }
        grad.finish(report);
        hess.finish(report);
    }

    // --- rasterizer gaussian weight ----------------------------------------
    {
        QuantityCheck dpi("gaussian_weight_dpi", 1e-5, options);
        QuantityCheck d2pi("gaussian_weight_d2pi", 1e-5, options);
        QuantityCheck dsig("gaussian_weight_dsigma", 1e-5, options);
        QuantityCheck d2sig("gaussian_weight_d2sigma", 1e-5, options);
        QuantityCheck dmix("gaussian_weight_dpi_dsigma", 1e-5, options);
        const SplatList list = build_splat_list(scene, camera, RasterOptions::reference());
        std::array<Mat2, 3> dirs;
        dirs[0] << 1, 0, 0, 0;
        dirs[1] << 0, 0, 0, 1;
        dirs[2] << 0, 1, 1, 0;
        const double h = 1e-5;
        for (int s = 0; s < std::min<int>(6, static_cast<int>(list.entries.size())); ++s) {
            const SplatEntry& e = list.entries[s];
            const Vec2 x = e.proj.pixel + Vec2(rng.uniform(-2, 2), rng.uniform(-2, 2));
            const auto d = gaussian_weight(e.proj.cov2d, e.proj.pixel, x);
            for (int a = 0; a < 2; ++a) {
                const double fd_v = detail::fd_adaptive(
                    [&](double off) {
                        Vec2 pi = e.proj.pixel;
                        pi[a] += off;
                        return gaussian_weight(e.proj.cov2d, pi, x).g;
                    },
                    h);
                dpi.record(d.d_pi[a], fd_v);
                for (int b = 0; b < 2; ++b) {
                    const double fd_h = detail::fd_adaptive(
                        [&](double off) {
                            Vec2 pi = e.proj.pixel;
                            pi[a] += off;
                            return gaussian_weight(e.proj.cov2d, pi, x).d_pi[b];
                        },
                        h);
                    d2pi.record(d.d2_pi(b, a), fd_h);
                }
            }
            for (const Mat2& dir : dirs) {
                const double fd_v = detail::fd_adaptive(
                    [&](double off) {
                        return gaussian_weight(e.proj.cov2d + off * dir, e.proj.pixel, x).g;
                    },
                    h);
                dsig.record((d.d_sigma.array() * dir.array()).sum(), fd_v);
                for (int p = 0; p < 2; ++p) {
                    for (int l = 0; l < 2; ++l) {
                        const double fd_h = detail::fd_adaptive(
                            [&](double off) {
                                return gaussian_weight(e.proj.cov2d + off * dir, e.proj.pixel, x)
                                    .d_sigma(p, l);
                            },
                            h);
                        double analytic = 0.0;
                        for (int g2 = 0; g2 < 2; ++g2) {
                            for (int h2 = 0; h2 < 2; ++h2) {
                                analytic += d.d2_sigma[p][l](g2, h2) * dir(g2, h2);
                            }
                        }
                        d2sig.record(analytic, fd_h);
                    }
                }
                for (int a = 0; a < 2; ++a) {
                    const double fd_m = detail::fd_adaptive(
                        [&](double off) {
                            return gaussian_weight(e.proj.cov2d + off * dir, e.proj.pixel, x)
                                .d_pi[a];
                        },
                        h);
                    dmix.record((d.d2_pi_sigma[a].array() * dir.array()).sum(), fd_m);
                }
            }
        }
        dpi.finish(report);
        d2pi.finish(report);
        dsig.finish(report);
        d2sig.finish(report);
        dmix.finish(report);
    }

    // --- loss fields --------------------------------------------------------
    {
        QuantityCheck grad("loss_grad", tol, options);
        QuantityCheck hess("ssim_hess_diag", options.ssim_hess_tolerance, options);
        const Image rendered = render_reference(scene, camera).image;
        const LossResult lr = total_loss_derivs(rendered, target, loss_config);
        for (int trial = 0; trial < options.sampled_pixels; ++trial) {
            const int x = rng.index(rendered.width);
            const int y = rng.index(rendered.height);
            const int ch = rng.index(3);
            auto loss_at_value = [&](double v) {
                Image probe = rendered;
                probe.at(x, y, ch) += v;
                return total_loss_value(probe, target, loss_config);
            };
            auto loss_at = loss_at_value;
            // Meaningful gradient entries sit around 1/(3N) ~ 1e-4, so the
            // floor at 0.1% of that scale keeps noise-floor entries from
            // tripping the gate. The step stays small because low-variance
            // SSIM windows carry heavy higher-order terms; plain central
            // differences avoid Richardson's noise amplification here.
            grad.record(lr.derivs.g(x, y)[ch], fd::derivative(loss_at_value, 0.0, 2e-5), 1e-7);
            const double fd_h = fd::second_derivative(loss_at, 0.0, 1e-4);
            hess.record(lr.derivs.h(x, y)[ch], fd_h, 1e-8);
        }
        grad.finish(report);
        hess.finish(report);
    }

    // --- assembled solve gradients ------------------------------------------
    // Finite differences of a rendered loss resolve ~1e-10 absolute at these
    // step sizes, so entries far below the meaningful gradient scale (1e-5
    // and up) compare against a 1e-6 floor rather than their own magnitude.
    {
        QuantityCheck pos("solve_position_grad", tol, options);
        QuantityCheck rot("solve_rotation_grad", tol, options);
        QuantityCheck scal("solve_scaling_grad", tol, options);
        QuantityCheck opac("solve_opacity_grad", tol, options);
        QuantityCheck col("solve_color_grad", tol, options);
        NewtonOptions newton;
        newton.step_cap_factor = 0.0;  // caps disabled for derivative checks
        const ViewContext ctx =
            build_view_context(scene, camera, target, RasterOptions::reference(), loss_config);
        for (int k : kernel_ids) {
            if (ctx.inverted.entry_of_kernel[k] < 0) continue;

            const PositionSolve ps = solve_position(scene, k, ctx, {}, newton);
            for (int i = 0; i < 2; ++i) {
                const double fd_g = detail::fd_adaptive(
                    [&](double off) {
                        Scene probe = scene;
                        probe.kernels[k].position += off * ps.subspace.basis.col(i);
                        return rendered_loss(probe);
                    },
                    3e-5);
                pos.record(ps.sys.grad[i], fd_g, 1e-6);
            }

            const RotationSolve rs = solve_rotation(scene, k, ctx, {}, newton);
            const double fd_rot = detail::fd_adaptive(
                [&](double off) {
                    Scene probe = scene;
                    const Vec4 dq = axis_rotation_quaternion(off, rs.axis);
                    probe.kernels[k].quaternion = renormalize_quaternion(
                        quaternion_multiply(dq, probe.kernels[k].quaternion));
                    return rendered_loss(probe);
                },
                1e-5);
            rot.record(rs.sys.grad[0], fd_rot, 1e-6);

            const ScalingSolve ss = solve_scaling(scene, k, ctx, {}, newton);
            if (!ss.subspace.degenerate) {
                const Mat2 sigma0 =
                    ctx.list.entries[ctx.inverted.entry_of_kernel[k]].proj.cov2d;
                for (int i = 0; i < 2; ++i) {
                    const Vec2 v = ss.subspace.eigenvectors.col(i);
                    const Mat2 dir = v * v.transpose();
                    const double fd_g = detail::fd_adaptive(
                        [&](double off) {
                            Cov2dOverride cov{k, sigma0 + off * dir};
                            return rendered_loss(scene, &cov);
                        },
                        1e-5);
                    scal.record(ss.sys.grad[i], fd_g, 1e-6);
                }
            }

            const OpacitySolve os = solve_opacity(scene, k, ctx, {}, newton);
            const double fd_sigma = detail::fd_adaptive(
                [&](double off) {
                    Scene probe = scene;
                    probe.kernels[k].sigma += off;
                    return rendered_loss(probe);
                },
                1e-5);
            opac.record(os.data_grad, fd_sigma, 1e-6);

            const ColorSolve cs = solve_color(scene, k, ctx, {}, newton);
            for (int trial = 0; trial < 3; ++trial) {
                const int ch = rng.index(3);
                const int j = rng.index(sh_coeff_count(scene.sh_degree));
                const double fd_c = detail::fd_adaptive(
                    [&](double off) {
                        Scene probe = scene;
                        probe.kernels[k].sh[ch][j] += off;
                        return rendered_loss(probe);
                    },
                    1e-4);
                col.record(cs.sys[ch].grad[j], fd_c, 1e-6);
            }
        }
        pos.finish(report);
        rot.finish(report);
        scal.finish(report);
        opac.finish(report);
        col.finish(report);
    }

    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return report;
}

}  // namespace ngs
