#pragma once

#include <Eigen/Eigenvalues>

#include <cmath>
#include <ostream>
#include <span>
#include <vector>

#include "ngs/camera.hpp"
#include "ngs/core.hpp"
#include "ngs/loss.hpp"
#include "ngs/rasterizer.hpp"
#include "ngs/scene.hpp"
#include "ngs/sh.hpp"

namespace ngs {

inline constexpr double kRidgeMin = 1e-8;

enum class Attribute { position, rotation, scaling, opacity, color };

inline const char* attribute_name(Attribute a) {
    switch (a) {
        case Attribute::position: return "position";
        case Attribute::rotation: return "rotation";
        case Attribute::scaling: return "scaling";
        case Attribute::opacity: return "opacity";
        case Attribute::color: return "color";
    }
    return "?";
}

/// Closed-form eigendecomposition of a symmetric 2x2 matrix; ascending
/// eigenvalues, orthonormal columns. Allocation free for the hot paths.
struct Sym2Eigen {
    Vec2 values = Vec2::Zero();
    Mat2 vectors = Mat2::Identity();
};

inline Sym2Eigen sym2_eigen(const Mat2& m) {
    Sym2Eigen out;
    const double a = m(0, 0), b = 0.5 * (m(0, 1) + m(1, 0)), c = m(1, 1);
    const double half_tr = 0.5 * (a + c);
    const double disc = std::sqrt(std::max(0.0, 0.25 * (a - c) * (a - c) + b * b));
    out.values = Vec2(half_tr - disc, half_tr + disc);
    if (disc < 1e-300) return out;  // isotropic: any orthonormal frame works
    // Eigenvector of the larger eigenvalue; the smaller is its perpendicular.
    Vec2 v1(b, out.values[1] - a);
    if (v1.squaredNorm() < 1e-300) v1 = Vec2(out.values[1] - c, b);
    if (v1.squaredNorm() < 1e-300) v1 = Vec2(1, 0);
    v1.normalize();
    out.vectors.col(1) = v1;
    out.vectors.col(0) = Vec2(-v1.y(), v1.x());
    return out;
}

struct NewtonOptions {
    double mu_min = kRidgeMin;
    double eig_floor_rel = 5e-2;    // also floor eigenvalues at rel * |lambda|_max
    double step_cap_factor = 1.0;   // position cap = factor * max(scale); <= 0 disables
    double scale_cap_factor = 2.0;  // per-solve bound: s_new in [s/f, f*s]; <= 0 disables
    double color_cap = 1.0;         // per-channel coefficient step norm cap; <= 0 disables
    double theta_cap = M_PI / 2;    // rotation angle cap; beyond this the spin aliases
    double barrier_weight = 1e-4;   // decayed by the trainer, floor 1e-6
    int max_backtrack = 8;
    double eigengap_rel = 1e-6;     // repeated-eigenvalue fallback threshold
};

/// One small dense Newton system for a single kernel attribute group.
/// `hess` stores the safeguarded matrix actually solved.
struct LocalNewtonSystem {
    int kernel = -1;
    Attribute attribute = Attribute::position;
    int channel = -1;  // color solves only
    MatX hess;
    VecX grad;
    VecX delta;
    bool accepted = true;
};

// ---------------------------------------------------------------------------
// View context: everything one solve needs from one rendered view
// ---------------------------------------------------------------------------

struct ViewContext {
    const Scene* scene = nullptr;  // kernel state the capture was rendered from
    Camera camera;
    Image target;
    SplatList list;
    Image rendered;
    CaptureBuffer capture;
    InvertedCapture inverted;
    PixelLossDerivatives loss;
    double loss_value = 0.0;
};

/// Renders one view with capture and evaluates the per-pixel loss field. The
/// scene reference must outlive the context; solves read kernel state through
/// it so stale captures stay self-consistent.
inline ViewContext build_view_context(const Scene& scene, const Camera& camera,
                                      const Image& target, const RasterOptions& raster,
                                      const LossConfig& loss_config, bool want_hessian = true) {
    ViewContext ctx;
    ctx.scene = &scene;
    ctx.camera = camera;
    ctx.target = target;
    ctx.list = build_splat_list(scene, camera, raster);
    RenderTarget rt = composite_forward(ctx.list, scene.background, raster, true);
    ctx.rendered = std::move(rt.image);
    ctx.capture = std::move(*rt.capture);
    ctx.inverted = invert_capture(ctx.list, ctx.capture, scene.background,
                                  static_cast<int>(scene.kernels.size()));
    LossResult lr = total_loss_derivs(ctx.rendered, ctx.target, loss_config, want_hessian);
    ctx.loss = std::move(lr.derivs);
    ctx.loss_value = lr.value;
    return ctx;
}

// ---------------------------------------------------------------------------
// Subspaces
// ---------------------------------------------------------------------------

/// In-plane position basis: two orthonormal columns perpendicular to the view
/// direction, Gram-Schmidt of the world up axis (z fallback near the poles).
struct PositionSubspace {
    Mat32 basis = Mat32::Zero();  // [u_x u_y]
};

inline PositionSubspace build_position_subspace(const Vec3& r) {
    Vec3 seed = Vec3::UnitY();
    if (std::abs(r.dot(seed)) > 0.99) seed = Vec3::UnitZ();
    const Vec3 u_y = (seed - r * r.dot(seed)).normalized();
    const Vec3 u_x = r.cross(u_y);
    PositionSubspace out;
    out.basis.col(0) = u_x;
    out.basis.col(1) = u_y;
    return out;
}

/// Eigenframe of the projected covariance plus the first-order sensitivity
/// T = dlambda/ds and its pseudo-inverse used to pull eigenvalue updates back
/// to the 3D scale vector.
struct ScalingSubspace {
    Vec2 eigenvalues = Vec2::Zero();  // ascending: (lambda_min, lambda_max)
    Mat2 eigenvectors = Mat2::Identity();
    Eigen::Matrix<double, 2, 3> t_map = Eigen::Matrix<double, 2, 3>::Zero();
    Mat32 t_pinv = Mat32::Zero();     // min-norm right inverse of t_map
    bool degenerate = false;          // repeated eigenvalues: isotropic fallback
};

inline ScalingSubspace build_scaling_subspace(const SplatEntry& entry,
                                              const GaussianKernel& kernel, const Camera& camera,
                                              double eigengap_rel) {
    ScalingSubspace out;
    const Sym2Eigen eig = sym2_eigen(entry.proj.cov2d);
    out.eigenvalues = eig.values;
    out.eigenvectors = eig.vectors;
    out.degenerate =
        (out.eigenvalues[1] - out.eigenvalues[0]) <= eigengap_rel * std::abs(out.eigenvalues[1]);

    const Mat3 rot = quaternion_to_rotation(kernel.quaternion);
    const Mat23 n = entry.proj.ewa_jacobian * camera.view_rot * rot;
    for (int i = 0; i < 2; ++i) {
        const Vec2 v = out.eigenvectors.col(i);
        for (int c = 0; c < 3; ++c) {
            const double vn = v.dot(n.col(c));
            out.t_map(i, c) = 2.0 * kernel.scale[c] * vn * vn;
        }
    }
    // Min-norm right inverse T^T (T T^T)^+ with a spectral cutoff on the 2x2
    // Gram matrix, closed form so worker threads never touch the allocator.
    const Mat2 gram = out.t_map * out.t_map.transpose();
    const Sym2Eigen ge = sym2_eigen(gram);
    const double cutoff = std::max(1e-30, 1e-12 * std::abs(ge.values[1]));
    Mat2 gram_pinv = Mat2::Zero();
    for (int i = 0; i < 2; ++i) {
        if (ge.values[i] > cutoff) {
            gram_pinv += (1.0 / ge.values[i]) * ge.vectors.col(i) * ge.vectors.col(i).transpose();
        }
    }
    out.t_pinv = out.t_map.transpose() * gram_pinv;
    return out;
}

/// Symmetric logarithmic barrier keeping opacity strictly inside (0, 1).
struct OpacityBarrier {
    double weight = 1e-4;

    double value(double sigma) const { return -weight * (std::log(sigma) + std::log(1.0 - sigma)); }
    double grad(double sigma) const { return -weight * (1.0 / sigma - 1.0 / (1.0 - sigma)); }
    double hess(double sigma) const {
        return weight * (1.0 / (sigma * sigma) + 1.0 / ((1.0 - sigma) * (1.0 - sigma)));
    }
};

// ---------------------------------------------------------------------------
// Safeguard and solve
// ---------------------------------------------------------------------------

/// Spectrum repair for the local systems. Negative curvature directions keep
/// their magnitude but flip to descent (the saddle-free Newton treatment);
/// everything is floored at mu = max(mu_min, rel * |lambda|_max) so weakly
/// observed directions cannot catapult the update. H' >= mu_min * I always.
inline MatX psd_safeguard(const MatX& hess, double mu_min = kRidgeMin,
                          double eig_floor_rel = 0.0) {
    const int n = static_cast<int>(hess.rows());
    if (n == 1) {
        const double a = hess(0, 0);
        const double mu = std::max(mu_min, eig_floor_rel * std::abs(a));
        MatX out(1, 1);
        out(0, 0) = std::max(std::abs(a), mu);
        return out;
    }
    if (n == 2) {
        const Mat2 sym = 0.5 * (hess + hess.transpose());
        const Sym2Eigen eig = sym2_eigen(sym);
        const double lam_max = std::max(std::abs(eig.values[0]), std::abs(eig.values[1]));
        const double mu = std::max(mu_min, eig_floor_rel * lam_max);
        if (eig.values[0] >= mu) return hess;
        Mat2 rebuilt = Mat2::Zero();
        for (int i = 0; i < 2; ++i) {
            rebuilt += std::max(std::abs(eig.values[i]), mu) * eig.vectors.col(i) *
                       eig.vectors.col(i).transpose();
        }
        return rebuilt;
    }
    Eigen::SelfAdjointEigenSolver<MatX> eig(0.5 * (hess + hess.transpose()));
    const double lam_max = eig.eigenvalues().cwiseAbs().maxCoeff();
    const double mu = std::max(mu_min, eig_floor_rel * lam_max);
    if (eig.eigenvalues().minCoeff() >= mu) return hess;
    MatX rebuilt = MatX::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        rebuilt += std::max(std::abs(eig.eigenvalues()[i]), mu) * eig.eigenvectors().col(i) *
                   eig.eigenvectors().col(i).transpose();
    }
    return rebuilt;
}

inline VecX solve_safeguarded(MatX& hess, const VecX& grad, double mu_min = kRidgeMin,
                              double eig_floor_rel = 0.0) {
    hess = psd_safeguard(hess, mu_min, eig_floor_rel);
    return hess.ldlt().solve(-grad);
}

// ---------------------------------------------------------------------------
// Per-view term assembly
// ---------------------------------------------------------------------------

namespace detail {

inline Vec2 pixel_center(const SplatRecord& rec) { return Vec2(rec.px + 0.5, rec.py + 0.5); }

}  // namespace detail

struct PositionTerms {
    Vec3 grad = Vec3::Zero();
    Mat3 hess = Mat3::Zero();
    bool visible = false;
};

/// Full 3-dof position gradient/Hessian of one view's loss for one kernel:
/// SH color path through r(p) plus the Gaussian path through pi(p), Sigma(p),
/// contracted with the per-pixel loss derivatives. Includes the Gauss-Newton
/// term, the curvature term and the G x c~ cross terms.
inline PositionTerms position_terms(int kernel_id, const ViewContext& view,
                                    bool want_hessian = true) {
    const Scene& scene = *view.scene;
    PositionTerms out;
    const int entry_idx = view.inverted.entry_of_kernel[kernel_id];
    if (entry_idx < 0) return out;
    const auto records = view.inverted.records_for(kernel_id);
    if (records.empty()) return out;
    out.visible = true;

    const GaussianKernel& kernel = scene.kernels[kernel_id];
    const SplatEntry& entry = view.list.entries[entry_idx];

    const auto pd = projection_derivatives(view.camera, kernel.position);
    const auto cd = cov2d_derivatives_wrt_position(view.camera, kernel);
    const ShColorDerivs sh = sh_color_derivs_wrt_position(view.camera, kernel, scene.sh_degree);
    if (!pd || !cd) return out;

    const double sigma_k = entry.opacity;
    for (const SplatRecord& rec : records) {
        const Vec3 gl = view.loss.g(rec.px, rec.py);
        const Vec3 hl = want_hessian ? view.loss.h(rec.px, rec.py) : Vec3::Zero();
        const GaussianWeightDerivs gw =
            gaussian_weight(entry.proj.cov2d, entry.proj.pixel, detail::pixel_center(rec));

        // dG/dp through pi and Sigma.
        Vec3 dg_dp = pd->jac.transpose() * gw.d_pi;
        for (int c = 0; c < 3; ++c) {
            dg_dp[c] += (gw.d_sigma.array() * cd->jac[c].array()).sum();
        }

        Mat3 d2g_dp2 = Mat3::Zero();
        if (want_hessian) {
            d2g_dp2 = pd->jac.transpose() * gw.d2_pi * pd->jac;
            for (int i = 0; i < 2; ++i) d2g_dp2 += gw.d_pi[i] * pd->hess[i];
            std::array<Mat2, 3> y;  // d2G/dSigma2 contracted once with dSigma/dp_c
            for (int c = 0; c < 3; ++c) {
                Mat2 acc = Mat2::Zero();
                for (int p = 0; p < 2; ++p) {
                    for (int l = 0; l < 2; ++l) {
                        acc += cd->jac[c](p, l) * gw.d2_sigma[p][l];
                    }
                }
                y[c] = acc;
            }
            std::array<Vec3, 2> mixed;  // d2G/dpi dSigma contracted with dSigma/dp
            for (int a = 0; a < 2; ++a) {
                for (int c = 0; c < 3; ++c) {
                    mixed[a][c] = (gw.d2_pi_sigma[a].array() * cd->jac[c].array()).sum();
                }
            }
            for (int c = 0; c < 3; ++c) {
                for (int d = 0; d < 3; ++d) {
                    double v = (y[c].array() * cd->jac[d].array()).sum();
                    v += (gw.d_sigma.array() * cd->hess[c][d].array()).sum();
                    for (int a = 0; a < 2; ++a) {
                        v += pd->jac(a, c) * mixed[a][d] + pd->jac(a, d) * mixed[a][c];
                    }
                    d2g_dp2(c, d) += v;
                }
            }
        }

        const double w_alpha = sigma_k * rec.transmittance;
        for (int ch = 0; ch < 3; ++ch) {
            const double a_ch = rec.view_color[ch] - rec.behind[ch];
            const Vec3 dctilde = sh.jac.row(ch).transpose();
            const Vec3 dc_dp = w_alpha * (a_ch * dg_dp + rec.weight * dctilde);
            out.grad += gl[ch] * dc_dp;
            if (want_hessian) {
                Mat3 d2c = a_ch * d2g_dp2 + rec.weight * sh.hess[ch];
                d2c += dg_dp * dctilde.transpose() + dctilde * dg_dp.transpose();
                out.hess += hl[ch] * dc_dp * dc_dp.transpose() + gl[ch] * w_alpha * d2c;
            }
        }
    }
    return out;
}

struct ScalarTerms {
    double grad = 0.0;
    double hess = 0.0;
    bool visible = false;
};

/// Rotation terms for a spin of angle theta about `axis` (the primary view
/// direction): q <- (cos NB, sin NB * axis) * q.
inline ScalarTerms rotation_terms(int kernel_id, const Vec3& axis,
                                  const ViewContext& view, bool want_hessian = true) {
    const Scene& scene = *view.scene;
    ScalarTerms out;
    const int entry_idx = view.inverted.entry_of_kernel[kernel_id];
    if (entry_idx < 0) return out;
    const auto records = view.inverted.records_for(kernel_id);
    if (records.empty()) return out;
    out.visible = true;

    const GaussianKernel& kernel = scene.kernels[kernel_id];
    const SplatEntry& entry = view.list.entries[entry_idx];

    Mat3 skew;
    skew << 0, -axis.z(), axis.y(), axis.z(), 0, -axis.x(), -axis.y(), axis.x(), 0;
    const Mat3 a3 = build_covariance_3d(kernel.quaternion, kernel.scale);
    const Mat3 da = 2.0 * (skew * a3 - a3 * skew);
    const Mat3 kk = skew * skew;
    const Mat3 d2a = 4.0 * (kk * a3 + a3 * kk) - 8.0 * skew * a3 * skew;

    const Mat23 jw = entry.proj.ewa_jacobian * view.camera.view_rot;
    const Mat2 s1 = jw * da * jw.transpose();
    const Mat2 s2 = jw * d2a * jw.transpose();

    const double sigma_k = entry.opacity;
    for (const SplatRecord& rec : records) {
        const Vec3 gl = view.loss.g(rec.px, rec.py);
        const Vec3 hl = want_hessian ? view.loss.h(rec.px, rec.py) : Vec3::Zero();
        const GaussianWeightDerivs gw =
            gaussian_weight(entry.proj.cov2d, entry.proj.pixel, detail::pixel_center(rec));

        const double dg = (gw.d_sigma.array() * s1.array()).sum();
        double d2g = 0.0;
        if (want_hessian) {
            for (int p = 0; p < 2; ++p) {
                for (int l = 0; l < 2; ++l) {
                    d2g += s1(p, l) * (gw.d2_sigma[p][l].array() * s1.array()).sum();
                }
            }
            d2g += (gw.d_sigma.array() * s2.array()).sum();
        }

        const double w_alpha = sigma_k * rec.transmittance;
        for (int ch = 0; ch < 3; ++ch) {
            const double a_ch = rec.view_color[ch] - rec.behind[ch];
            const double dc = w_alpha * a_ch * dg;
            out.grad += gl[ch] * dc;
            if (want_hessian) out.hess += hl[ch] * dc * dc + gl[ch] * w_alpha * a_ch * d2g;
        }
    }
    return out;
}

struct ScalingTerms {
    Vec2 grad = Vec2::Zero();
    Mat2 hess = Mat2::Zero();
    bool visible = false;
};

/// Eigenvalue-space terms. The view's own eigenframe parameterizes its
/// projected footprint, so a duplicated view contributes exactly the primary
/// terms. Sigma is linear in lambda, hence no curvature from the map itself.
inline ScalingTerms scaling_terms(int kernel_id, const ViewContext& view,
                                  double eigengap_rel, bool want_hessian = true) {
    const Scene& scene = *view.scene;
    ScalingTerms out;
    const int entry_idx = view.inverted.entry_of_kernel[kernel_id];
    if (entry_idx < 0) return out;
    const auto records = view.inverted.records_for(kernel_id);
    if (records.empty()) return out;
    out.visible = true;

    const SplatEntry& entry = view.list.entries[entry_idx];
    const ScalingSubspace sub =
        build_scaling_subspace(entry, scene.kernels[kernel_id], view.camera, eigengap_rel);
    std::array<Mat2, 2> dirs;
    for (int i = 0; i < 2; ++i) {
        const Vec2 v = sub.eigenvectors.col(i);
        dirs[i] = v * v.transpose();
    }

    const double sigma_k = entry.opacity;
    for (const SplatRecord& rec : records) {
        const Vec3 gl = view.loss.g(rec.px, rec.py);
        const Vec3 hl = want_hessian ? view.loss.h(rec.px, rec.py) : Vec3::Zero();
        const GaussianWeightDerivs gw =
            gaussian_weight(entry.proj.cov2d, entry.proj.pixel, detail::pixel_center(rec));

        Vec2 dg;
        for (int i = 0; i < 2; ++i) dg[i] = (gw.d_sigma.array() * dirs[i].array()).sum();
        Mat2 d2g = Mat2::Zero();
        if (want_hessian) {
            for (int i = 0; i < 2; ++i) {
                for (int j = 0; j < 2; ++j) {
                    double v = 0.0;
                    for (int p = 0; p < 2; ++p) {
                        for (int l = 0; l < 2; ++l) {
                            v += dirs[i](p, l) * (gw.d2_sigma[p][l].array() * dirs[j].array()).sum();
                        }
                    }
                    d2g(i, j) = v;
                }
            }
        }

        const double w_alpha = sigma_k * rec.transmittance;
        for (int ch = 0; ch < 3; ++ch) {
            const double a_ch = rec.view_color[ch] - rec.behind[ch];
            const Vec2 dc = w_alpha * a_ch * dg;
            out.grad += gl[ch] * dc;
            if (want_hessian) {
                out.hess += hl[ch] * dc * dc.transpose() + gl[ch] * w_alpha * a_ch * d2g;
            }
        }
    }
    return out;
}

/// 3-dof scale-space gradient (first order only), used by the baselines.
inline Vec3 scaling_gradient_s(int kernel_id, const ViewContext& view) {
    const Scene& scene = *view.scene;
    Vec3 grad = Vec3::Zero();
    const int entry_idx = view.inverted.entry_of_kernel[kernel_id];
    if (entry_idx < 0) return grad;
    const auto records = view.inverted.records_for(kernel_id);
    if (records.empty()) return grad;

    const GaussianKernel& kernel = scene.kernels[kernel_id];
    const SplatEntry& entry = view.list.entries[entry_idx];
    const Mat3 rot = quaternion_to_rotation(kernel.quaternion);
    const Mat23 n = entry.proj.ewa_jacobian * view.camera.view_rot * rot;
    std::array<Mat2, 3> dsigma_ds;
    for (int c = 0; c < 3; ++c) {
        dsigma_ds[c] = 2.0 * kernel.scale[c] * n.col(c) * n.col(c).transpose();
    }

    const double sigma_k = entry.opacity;
    for (const SplatRecord& rec : records) {
        const Vec3 gl = view.loss.g(rec.px, rec.py);
        const GaussianWeightDerivs gw =
            gaussian_weight(entry.proj.cov2d, entry.proj.pixel, detail::pixel_center(rec));
        Vec3 dg;
        for (int c = 0; c < 3; ++c) dg[c] = (gw.d_sigma.array() * dsigma_ds[c].array()).sum();
        const double w_alpha = sigma_k * rec.transmittance;
        for (int ch = 0; ch < 3; ++ch) {
            const double a_ch = rec.view_color[ch] - rec.behind[ch];
            grad += gl[ch] * w_alpha * a_ch * dg;
        }
    }
    return grad;
}

/// Opacity data terms: dc/dsigma = G T (c~ - behind), zero second derivative
/// of the color path, so the Hessian is pure Gauss-Newton.
inline ScalarTerms opacity_data_terms(int kernel_id, const ViewContext& view,
                                      bool want_hessian = true) {
    ScalarTerms out;
    const int entry_idx = view.inverted.entry_of_kernel[kernel_id];
    if (entry_idx < 0) return out;
    const auto records = view.inverted.records_for(kernel_id);
    if (records.empty()) return out;
    out.visible = true;

    for (const SplatRecord& rec : records) {
        const Vec3 gl = view.loss.g(rec.px, rec.py);
        const Vec3 hl = want_hessian ? view.loss.h(rec.px, rec.py) : Vec3::Zero();
        for (int ch = 0; ch < 3; ++ch) {
            const double dc = rec.weight * rec.transmittance * (rec.view_color[ch] - rec.behind[ch]);
            out.grad += gl[ch] * dc;
            if (want_hessian) out.hess += hl[ch] * dc * dc;
        }
    }
    return out;
}

struct ColorTerms {
    std::array<VecX, 3> grad;   // per channel, active coefficients
    std::array<MatX, 3> hess;
    bool visible = false;
};

/// Color terms: the pixel color is linear in the SH coefficients with weight
/// w = G sigma T, so the per-channel Hessian is the rank-one basis outer
/// product scaled by the accumulated w^2-weighted loss curvature. Channels
/// clamped in a view contribute nothing from that view.
inline ColorTerms color_terms(int kernel_id, const ViewContext& view,
                              bool want_hessian = true) {
    const Scene& scene = *view.scene;
    const int n = sh_coeff_count(scene.sh_degree);
    ColorTerms out;
    for (int ch = 0; ch < 3; ++ch) {
        out.grad[ch] = VecX::Zero(n);
        out.hess[ch] = MatX::Zero(n, n);
    }
    const int entry_idx = view.inverted.entry_of_kernel[kernel_id];
    if (entry_idx < 0) return out;
    const auto records = view.inverted.records_for(kernel_id);
    if (records.empty()) return out;
    out.visible = true;

    const SplatEntry& entry = view.list.entries[entry_idx];
    const ShBasis basis = eval_sh_basis(entry.proj.view_dir, scene.sh_degree);
    const VecX phi = basis.values.head(n);

    Vec3 g_acc = Vec3::Zero();   // sum of gl * w per channel
    Vec3 h_acc = Vec3::Zero();   // sum of hl * w^2 per channel
    for (const SplatRecord& rec : records) {
        const Vec3 gl = view.loss.g(rec.px, rec.py);
        const double w = rec.alpha * rec.transmittance;  // G sigma T
        g_acc += gl * w;
        if (want_hessian) {
            const Vec3 hl = view.loss.h(rec.px, rec.py);
            h_acc += hl * w * w;
        }
    }
    for (int ch = 0; ch < 3; ++ch) {
        if (entry.color_clamped[ch]) continue;
        out.grad[ch] = g_acc[ch] * phi;
        if (want_hessian) out.hess[ch] = h_acc[ch] * phi * phi.transpose();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Solves (primary + secondary accumulation)
// ---------------------------------------------------------------------------

using ViewSpan = std::span<const ViewContext* const>;

struct PositionSolve {
    LocalNewtonSystem sys;
    PositionSubspace subspace;
    Vec3 delta_position = Vec3::Zero();
};

inline PositionSolve solve_position(const Scene& scene, int kernel_id, const ViewContext& primary,
                                    ViewSpan secondaries, const NewtonOptions& options = {}) {
    const GaussianKernel& kernel = scene.kernels[kernel_id];
    PositionTerms total = position_terms(kernel_id, primary);
    for (const ViewContext* view : secondaries) {
        const PositionTerms t = position_terms(kernel_id, *view);
        total.grad += t.grad;
        total.hess += t.hess;
        total.visible = total.visible || t.visible;
    }

    PositionSolve out;
    out.sys.kernel = kernel_id;
    out.sys.attribute = Attribute::position;
    const Vec3 r = view_direction(primary.camera, kernel.position);
    out.subspace = build_position_subspace(r);
    const Mat32& u = out.subspace.basis;

    MatX hess = u.transpose() * total.hess * u;
    const VecX grad = u.transpose() * total.grad;
    VecX delta = solve_safeguarded(hess, grad, options.mu_min, options.eig_floor_rel);
    out.sys.hess = hess;
    out.sys.grad = grad;

    Vec3 dp = u * delta;
    if (options.step_cap_factor > 0.0) {
        const double cap = options.step_cap_factor * kernel.scale.maxCoeff();
        const double norm = dp.norm();
        if (norm > cap) {
            dp *= cap / norm;
            delta *= cap / norm;
        }
    }
    out.sys.delta = delta;
    out.delta_position = dp;
    return out;
}

struct RotationSolve {
    LocalNewtonSystem sys;
    Vec3 axis = Vec3::UnitZ();
    double theta = 0.0;
};

inline RotationSolve solve_rotation(const Scene& scene, int kernel_id, const ViewContext& primary,
                                    ViewSpan secondaries, const NewtonOptions& options = {}) {
    const GaussianKernel& kernel = scene.kernels[kernel_id];
    RotationSolve out;
    out.sys.kernel = kernel_id;
    out.sys.attribute = Attribute::rotation;
    out.axis = view_direction(primary.camera, kernel.position);

    ScalarTerms total = rotation_terms(kernel_id, out.axis, primary);
    for (const ViewContext* view : secondaries) {
        const ScalarTerms t = rotation_terms(kernel_id, out.axis, *view);
        total.grad += t.grad;
        total.hess += t.hess;
    }

    MatX hess(1, 1);
    hess(0, 0) = total.hess;
    VecX grad(1);
    grad[0] = total.grad;
    out.sys.delta = solve_safeguarded(hess, grad, options.mu_min, options.eig_floor_rel);
    if (options.theta_cap > 0.0) {
        out.sys.delta[0] = std::clamp(out.sys.delta[0], -options.theta_cap, options.theta_cap);
    }
    out.sys.hess = hess;
    out.sys.grad = grad;
    out.theta = out.sys.delta[0];
    return out;
}

struct ScalingSolve {
    LocalNewtonSystem sys;
    ScalingSubspace subspace;   // primary view frame
    Vec3 delta_scale = Vec3::Zero();
};

inline ScalingSolve solve_scaling(const Scene& scene, int kernel_id, const ViewContext& primary,
                                  ViewSpan secondaries, const NewtonOptions& options = {}) {
    const GaussianKernel& kernel = scene.kernels[kernel_id];
    ScalingSolve out;
    out.sys.kernel = kernel_id;
    out.sys.attribute = Attribute::scaling;

    const int entry_idx = primary.inverted.entry_of_kernel[kernel_id];
    if (entry_idx >= 0) {
        out.subspace = build_scaling_subspace(primary.list.entries[entry_idx], kernel,
                                              primary.camera, options.eigengap_rel);
    } else {
        out.subspace.degenerate = true;
    }

    ScalingTerms total = scaling_terms(kernel_id, primary, options.eigengap_rel);
    for (const ViewContext* view : secondaries) {
        const ScalingTerms t = scaling_terms(kernel_id, *view, options.eigengap_rel);
        total.grad += t.grad;
        total.hess += t.hess;
        total.visible = total.visible || t.visible;
    }

    Vec2 delta_lambda = Vec2::Zero();
    if (out.subspace.degenerate) {
        // Repeated eigenvalues: one isotropic degree of freedom.
        const double g = total.grad.sum();
        const double h = total.hess.sum();
        MatX hess(1, 1);
        hess(0, 0) = h;
        VecX grad(1);
        grad[0] = g;
        const VecX d = solve_safeguarded(hess, grad, options.mu_min, options.eig_floor_rel);
        delta_lambda = Vec2(d[0], d[0]);
        out.sys.hess = hess;
        out.sys.grad = grad;
        out.sys.delta = d;
    } else {
        MatX hess = total.hess;
        VecX grad = total.grad;
        out.sys.delta = solve_safeguarded(hess, grad, options.mu_min, options.eig_floor_rel);
        out.sys.hess = hess;
        out.sys.grad = grad;
        delta_lambda = out.sys.delta;
    }

    Vec3 ds = out.subspace.t_pinv * delta_lambda;
    // Barely-covered kernels produce near-singular systems whose safeguarded
    // solves suggest enormous steps; bound the per-solve scale change the
    // same way the position step is capped.
    if (options.scale_cap_factor > 1.0) {
        double shrink = 1.0;
        for (int c = 0; c < 3; ++c) {
            const double lo = kernel.scale[c] / options.scale_cap_factor - kernel.scale[c];
            const double hi = kernel.scale[c] * options.scale_cap_factor - kernel.scale[c];
            if (ds[c] > hi) shrink = std::min(shrink, hi / ds[c]);
            if (ds[c] < lo) shrink = std::min(shrink, lo / ds[c]);
        }
        ds *= shrink;
    }
    bool feasible = false;
    for (int i = 0; i <= options.max_backtrack; ++i) {
        if (((kernel.scale + ds).array() > 0.0).all()) {
            feasible = true;
            break;
        }
        ds *= 0.5;
    }
    if (!feasible) {
        ds.setZero();
        out.sys.accepted = false;
    }
    out.delta_scale = ds;
    return out;
}

struct OpacitySolve {
    LocalNewtonSystem sys;
    double data_grad = 0.0;  // without the barrier, for derivative checks
    double new_sigma = 0.5;
};

inline OpacitySolve solve_opacity(const Scene& scene, int kernel_id, const ViewContext& primary,
                                  ViewSpan secondaries, const NewtonOptions& options = {}) {
    const GaussianKernel& kernel = scene.kernels[kernel_id];
    ScalarTerms total = opacity_data_terms(kernel_id, primary);
    for (const ViewContext* view : secondaries) {
        const ScalarTerms t = opacity_data_terms(kernel_id, *view);
        total.grad += t.grad;
        total.hess += t.hess;
    }

    const OpacityBarrier barrier{options.barrier_weight};
    OpacitySolve out;
    out.sys.kernel = kernel_id;
    out.sys.attribute = Attribute::opacity;
    out.data_grad = total.grad;

    MatX hess(1, 1);
    hess(0, 0) = total.hess + barrier.hess(kernel.sigma);
    VecX grad(1);
    grad[0] = total.grad + barrier.grad(kernel.sigma);
    out.sys.delta = solve_safeguarded(hess, grad, options.mu_min, options.eig_floor_rel);
    out.sys.hess = hess;
    out.sys.grad = grad;
    out.new_sigma = std::clamp(kernel.sigma + out.sys.delta[0],
                               std::nextafter(kSigmaMargin, 1.0),
                               std::nextafter(1.0 - kSigmaMargin, 0.0));
    return out;
}

struct ColorSolve {
    std::array<LocalNewtonSystem, 3> sys;
    std::array<VecX, 3> delta;  // active coefficients per channel
};

inline ColorSolve solve_color(const Scene& scene, int kernel_id, const ViewContext& primary,
                              ViewSpan secondaries, const NewtonOptions& options = {}) {
    (void)scene;
    ColorTerms total = color_terms(kernel_id, primary);
    for (const ViewContext* view : secondaries) {
        const ColorTerms t = color_terms(kernel_id, *view);
        for (int ch = 0; ch < 3; ++ch) {
            total.grad[ch] += t.grad[ch];
            total.hess[ch] += t.hess[ch];
        }
    }
    ColorSolve out;
    for (int ch = 0; ch < 3; ++ch) {
        out.sys[ch].kernel = kernel_id;
        out.sys[ch].attribute = Attribute::color;
        out.sys[ch].channel = ch;
        MatX hess = total.hess[ch];
        VecX delta = solve_safeguarded(hess, total.grad[ch], options.mu_min, options.eig_floor_rel);
        if (options.color_cap > 0.0) {
            const double norm = delta.norm();
            if (norm > options.color_cap) delta *= options.color_cap / norm;
        }
        out.sys[ch].delta = delta;
        out.sys[ch].hess = hess;
        out.sys[ch].grad = total.grad[ch];
        out.delta[ch] = delta;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Commits (single-threaded phase)
// ---------------------------------------------------------------------------

inline void commit_position(GaussianKernel& kernel, const PositionSolve& solve) {
    if (!solve.sys.accepted) return;
    kernel.position += solve.delta_position;
}

inline void commit_rotation(GaussianKernel& kernel, const RotationSolve& solve) {
    if (!solve.sys.accepted) return;
    const Vec4 dq = axis_rotation_quaternion(solve.theta, solve.axis);
    kernel.quaternion = renormalize_quaternion(quaternion_multiply(dq, kernel.quaternion));
}

inline void commit_scaling(GaussianKernel& kernel, const ScalingSolve& solve) {
    if (!solve.sys.accepted) return;
    kernel.scale += solve.delta_scale;
}

inline void commit_opacity(GaussianKernel& kernel, const OpacitySolve& solve) {
    if (!solve.sys.accepted) return;
    kernel.sigma = solve.new_sigma;
}

inline void commit_color(GaussianKernel& kernel, const ColorSolve& solve, int sh_degree) {
    const int n = sh_coeff_count(sh_degree);
    for (int ch = 0; ch < 3; ++ch) {
        if (!solve.sys[ch].accepted) continue;
        kernel.sh[ch].head(n) += solve.delta[ch];
    }
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// Long-format CSV dump of local systems: kernel, attribute, channel, entry
/// kind (H, g or delta), indices and value.
inline void dump_systems_csv(std::ostream& os, const std::vector<LocalNewtonSystem>& systems) {
    os << "kernel,attribute,channel,entry,i,j,value\n";
    for (const auto& sys : systems) {
        const char* name = attribute_name(sys.attribute);
        for (int i = 0; i < sys.hess.rows(); ++i) {
            for (int j = 0; j < sys.hess.cols(); ++j) {
                os << sys.kernel << ',' << name << ',' << sys.channel << ",H," << i << ',' << j
                   << ',' << sys.hess(i, j) << '\n';
            }
        }
        for (int i = 0; i < sys.grad.size(); ++i) {
            os << sys.kernel << ',' << name << ',' << sys.channel << ",g," << i << ",-1,"
               << sys.grad[i] << '\n';
        }
        for (int i = 0; i < sys.delta.size(); ++i) {
            os << sys.kernel << ',' << name << ',' << sys.channel << ",delta," << i << ",-1,"
               << sys.delta[i] << '\n';
        }
    }
}

}  // namespace ngs
