#pragma once

#include <cmath>
#include <vector>

#include "ngs/core.hpp"
#include "ngs/image.hpp"

namespace ngs {

struct LossConfig {
    double lambda = 0.2;         // SSIM weight
    double c1 = 0.01 * 0.01;
    double c2 = 0.03 * 0.03;
    int window = 11;
    double window_sigma = 1.5;

    void validate() const {
        if (lambda < 0.0) throw InvalidInput("loss: lambda must be >= 0");
        if (window < 3 || window % 2 == 0) throw InvalidInput("loss: window must be odd and >= 3");
    }
};

/// Filter-weighted window statistics per pixel and channel. Border windows
/// renormalize the filter over the in-image taps, so constant images have
/// exact stats everywhere.
struct SsimWindowStats {
    int width = 0;
    int height = 0;
    std::array<std::vector<double>, 3> mu;      // rendered mean
    std::array<std::vector<double>, 3> mu_t;    // target mean
    std::array<std::vector<double>, 3> var;     // rendered variance (clamped at 0)
    std::array<std::vector<double>, 3> var_t;   // target variance (clamped at 0)
    std::array<std::vector<double>, 3> cov;     // rendered/target covariance
    std::vector<double> norm_x;                 // valid-tap weight sums per column
    std::vector<double> norm_y;                 // valid-tap weight sums per row
};

/// Per-pixel loss derivatives w.r.t. rendered color. The Hessian is diagonal
/// across channels by construction, so only the diagonal is stored.
struct PixelLossDerivatives {
    int width = 0;
    int height = 0;
    std::vector<double> grad;  // 3 per pixel
    std::vector<double> hess;  // 3 per pixel, diagonal entries

    Vec3 g(int x, int y) const {
        const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
        return Vec3(grad[i], grad[i + 1], grad[i + 2]);
    }
    Vec3 h(int x, int y) const {
        const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
        return Vec3(hess[i], hess[i + 1], hess[i + 2]);
    }
};

struct LossResult {
    double value = 0.0;
    double l2 = 0.0;
    double ssim_mean = 1.0;  // mean SSIM map over pixels and channels
    PixelLossDerivatives derivs;
};

namespace detail {

inline std::vector<double> gaussian_window_1d(int window, double sigma) {
    std::vector<double> w(window);
    const int half = window / 2;
    double sum = 0.0;
    for (int i = 0; i < window; ++i) {
        const double d = i - half;
        w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += w[i];
    }
    for (auto& v : w) v /= sum;
    return w;
}

/// Separable valid-tap convolution along x then y. Taps falling outside the
/// image are skipped; normalization is applied by the caller.
struct SeparableConv {
    int width, height, half;
    std::vector<double> kx, ky;
    mutable std::vector<double> tmp;

    SeparableConv(int w, int h, const std::vector<double>& kernel_x,
                  const std::vector<double>& kernel_y)
        : width(w), height(h), half(static_cast<int>(kernel_x.size()) / 2), kx(kernel_x),
          ky(kernel_y), tmp(static_cast<std::size_t>(w) * h) {}

    void run(const std::vector<double>& in, std::vector<double>& out) const {
        for (int y = 0; y < height; ++y) {
            const double* row = in.data() + static_cast<std::size_t>(y) * width;
            double* trow = tmp.data() + static_cast<std::size_t>(y) * width;
            for (int x = 0; x < width; ++x) {
                const int i0 = std::max(-half, -x);
                const int i1 = std::min(half, width - 1 - x);
                double acc = 0.0;
                for (int i = i0; i <= i1; ++i) acc += kx[i + half] * row[x + i];
                trow[x] = acc;
            }
        }
        for (int x = 0; x < width; ++x) {
            for (int y = 0; y < height; ++y) {
                const int j0 = std::max(-half, -y);
                const int j1 = std::min(half, height - 1 - y);
                double acc = 0.0;
                for (int j = j0; j <= j1; ++j) {
                    acc += ky[j + half] * tmp[static_cast<std::size_t>(y + j) * width + x];
                }
                out[static_cast<std::size_t>(y) * width + x] = acc;
            }
        }
    }
};

inline std::vector<double> axis_norms(int n, const std::vector<double>& kernel) {
    const int half = static_cast<int>(kernel.size()) / 2;
    std::vector<double> norms(n);
    for (int x = 0; x < n; ++x) {
        const int i0 = std::max(-half, -x);
        const int i1 = std::min(half, n - 1 - x);
        double s = 0.0;
        for (int i = i0; i <= i1; ++i) s += kernel[i + half];
        norms[x] = s;
    }
    return norms;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// L2 loss
// ---------------------------------------------------------------------------

/// L2 = sum |c - c^t|^2 / (6 |I|), chosen so the per-pixel gradient is
/// (c - c^t) / (3 |I|) and the Hessian is I3 / (3 |I|).
inline LossResult l2_loss_and_derivs(const Image& rendered, const Image& target) {
    if (!rendered.same_shape(target)) throw InvalidInput("l2 loss: image dimensions differ");
    const double inv = 1.0 / (3.0 * rendered.pixel_count());
    LossResult out;
    out.derivs.width = rendered.width;
    out.derivs.height = rendered.height;
    out.derivs.grad.resize(rendered.data.size());
    out.derivs.hess.assign(rendered.data.size(), inv);
    double acc = 0.0;
    for (std::size_t i = 0; i < rendered.data.size(); ++i) {
        const double d = rendered.data[i] - target.data[i];
        acc += d * d;
        out.derivs.grad[i] = inv * d;
    }
    out.l2 = 0.5 * inv * acc;
    out.value = out.l2;
    out.ssim_mean = 1.0;
    return out;
}

// ---------------------------------------------------------------------------
// SSIM stats
// ---------------------------------------------------------------------------

inline SsimWindowStats ssim_window_stats(const Image& rendered, const Image& target,
                                         const LossConfig& config) {
    config.validate();
    if (!rendered.same_shape(target)) throw InvalidInput("ssim stats: image dimensions differ");
    if (rendered.width < config.window || rendered.height < config.window) {
        throw InvalidInput("ssim stats: image smaller than the filter window");
    }
    const auto kernel = detail::gaussian_window_1d(config.window, config.window_sigma);
    const detail::SeparableConv conv(rendered.width, rendered.height, kernel, kernel);

    SsimWindowStats stats;
    stats.width = rendered.width;
    stats.height = rendered.height;
    stats.norm_x = detail::axis_norms(rendered.width, kernel);
    stats.norm_y = detail::axis_norms(rendered.height, kernel);

    const std::size_t n = rendered.pixel_count();
    std::vector<double> field(n), conv_c(n), conv_ct(n), conv_cc(n), conv_ctct(n), conv_cct(n);
    for (int ch = 0; ch < 3; ++ch) {
        for (std::size_t i = 0; i < n; ++i) field[i] = rendered.data[3 * i + ch];
        conv.run(field, conv_c);
        for (std::size_t i = 0; i < n; ++i) field[i] *= field[i];
        conv.run(field, conv_cc);
        for (std::size_t i = 0; i < n; ++i) field[i] = target.data[3 * i + ch];
        conv.run(field, conv_ct);
        for (std::size_t i = 0; i < n; ++i) field[i] *= field[i];
        conv.run(field, conv_ctct);
        for (std::size_t i = 0; i < n; ++i) {
            field[i] = rendered.data[3 * i + ch] * target.data[3 * i + ch];
        }
        conv.run(field, conv_cct);

        stats.mu[ch].resize(n);
        stats.mu_t[ch].resize(n);
        stats.var[ch].resize(n);
        stats.var_t[ch].resize(n);
        stats.cov[ch].resize(n);
        for (int y = 0; y < rendered.height; ++y) {
            for (int x = 0; x < rendered.width; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * rendered.width + x;
                const double inv_norm = 1.0 / (stats.norm_x[x] * stats.norm_y[y]);
                const double mu = conv_c[i] * inv_norm;
                const double mu_t = conv_ct[i] * inv_norm;
                stats.mu[ch][i] = mu;
                stats.mu_t[ch][i] = mu_t;
                stats.var[ch][i] = std::max(0.0, conv_cc[i] * inv_norm - mu * mu);
                stats.var_t[ch][i] = std::max(0.0, conv_ctct[i] * inv_norm - mu_t * mu_t);
                stats.cov[ch][i] = conv_cct[i] * inv_norm - mu * mu_t;
            }
        }
    }
    return stats;
}

// ---------------------------------------------------------------------------
// SSIM value and derivatives
// ---------------------------------------------------------------------------

struct SsimResult {
    double loss = 0.0;       // 1 - mean SSIM
    double ssim_mean = 1.0;  // mean SSIM map over channels and pixels
    PixelLossDerivatives derivs;
};

/// SSIM loss L_S = 1 - mean(SSIM) with analytic per-pixel first and second
/// derivatives. Every window containing a pixel contributes through the
/// f0..f3 / g0..g3 quotient algebra; the accumulation is carried out as
/// separable convolutions of window-center fields with the filter (gradient)
/// and the squared filter (Hessian).
inline SsimResult ssim_value_and_derivs(const SsimWindowStats& stats, const Image& rendered,
                                        const Image& target, const LossConfig& config,
                                        bool want_derivs = true, bool want_hessian = true) {
    config.validate();
    const int w = stats.width, h = stats.height;
    const std::size_t n = static_cast<std::size_t>(w) * h;
    const double inv_3n = 1.0 / (3.0 * n);

    const auto kernel = detail::gaussian_window_1d(config.window, config.window_sigma);
    std::vector<double> kernel_sq(kernel.size());
    for (std::size_t i = 0; i < kernel.size(); ++i) kernel_sq[i] = kernel[i] * kernel[i];
    const detail::SeparableConv conv_w(w, h, kernel, kernel);
    const detail::SeparableConv conv_w2(w, h, kernel_sq, kernel_sq);

    SsimResult out;
    if (want_derivs) {
        out.derivs.width = w;
        out.derivs.height = h;
        out.derivs.grad.assign(3 * n, 0.0);
        if (want_hessian) out.derivs.hess.assign(3 * n, 0.0);
    }

    std::vector<double> fp(n), fq(n), fr(n);                    // gradient center fields
    std::vector<double> fkw, ft0, ftc, ftct, ftcct, ftc2;       // Hessian center fields
    if (want_derivs && want_hessian) {
        fkw.resize(n); ft0.resize(n); ftc.resize(n);
        ftct.resize(n); ftcct.resize(n); ftc2.resize(n);
    }
    std::vector<double> sp(n), sq(n), sr(n), skw(n), st0(n), stc(n), stct(n), stcct(n), stc2(n);

    double ssim_sum = 0.0;
    for (int ch = 0; ch < 3; ++ch) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * w + x;
                const double mu = stats.mu[ch][i];
                const double mu_t = stats.mu_t[ch][i];
                const double f0 = 2.0 * mu * mu_t + config.c1;
                const double f1 = 2.0 * stats.cov[ch][i] + config.c2;
                const double f2 = mu * mu + mu_t * mu_t + config.c1;
                const double f3 = stats.var[ch][i] + stats.var_t[ch][i] + config.c2;
                const double nn = f0 * f1;
                const double dd = f2 * f3;
                const double ssim = nn / dd;
                ssim_sum += ssim;
                if (!want_derivs) continue;

                const double inv_d = 1.0 / dd;
                const double inv_norm = 1.0 / (stats.norm_x[x] * stats.norm_y[y]);
                // d f_i / du = w * (a_i + b_i * u'), u' in {c(m,n), c^t(m,n)}
                fp[i] = (2.0 * mu_t * (f1 - f0) * inv_d - 2.0 * mu * nn * inv_d / f2 +
                         2.0 * mu * nn * inv_d / f3) * inv_norm;
                fq[i] = 2.0 * f0 * inv_d * inv_norm;
                fr[i] = -2.0 * nn * inv_d / f3 * inv_norm;
                if (want_hessian) {
                    const double a0 = 2.0 * mu_t, a1 = -2.0 * mu_t, b1 = 2.0;
                    const double a2 = 2.0 * mu, a3 = -2.0 * mu, b3 = 2.0;
                    const double A = a0 * f1 + f0 * a1;
                    const double B = f0 * b1;
                    const double C = a2 * f3 + f2 * a3;
                    const double E = f2 * b3;
                    const double inv_d2 = inv_d * inv_d;
                    const double inv_d3 = inv_d2 * inv_d;
                    const double inv_norm2 = inv_norm * inv_norm;
                    fkw[i] = -2.0 * nn / (f2 * f3 * f3) * inv_norm;
                    ft0[i] = (2.0 * a0 * a1 * inv_d - 2.0 * A * C * inv_d2 -
                              nn * (2.0 * a2 * a3 + 2.0 * f3 - 2.0 * f2) * inv_d2 +
                              2.0 * nn * C * C * inv_d3) * inv_norm2;
                    ftc[i] = (-2.0 * A * E * inv_d2 - 2.0 * nn * a2 * b3 * inv_d2 +
                              4.0 * nn * C * E * inv_d3) * inv_norm2;
                    ftct[i] = (2.0 * a0 * b1 * inv_d - 2.0 * B * C * inv_d2) * inv_norm2;
                    ftcct[i] = -2.0 * B * E * inv_d2 * inv_norm2;
                    ftc2[i] = 2.0 * nn * E * E * inv_d3 * inv_norm2;
                }
            }
        }
        if (!want_derivs) continue;

        conv_w.run(fp, sp);
        conv_w.run(fq, sq);
        conv_w.run(fr, sr);
        if (want_hessian) {
            conv_w.run(fkw, skw);
            conv_w2.run(ft0, st0);
            conv_w2.run(ftc, stc);
            conv_w2.run(ftct, stct);
            conv_w2.run(ftcct, stcct);
            conv_w2.run(ftc2, stc2);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double c = rendered.data[3 * i + ch];
            const double ct = target.data[3 * i + ch];
            out.derivs.grad[3 * i + ch] = -inv_3n * (sp[i] + ct * sq[i] + c * sr[i]);
            if (want_hessian) {
                out.derivs.hess[3 * i + ch] =
                    -inv_3n * (skw[i] + st0[i] + c * stc[i] + ct * stct[i] + c * ct * stcct[i] +
                               c * c * stc2[i]);
            }
        }
    }

    out.ssim_mean = ssim_sum * inv_3n;
    out.loss = 1.0 - out.ssim_mean;
    return out;
}

// ---------------------------------------------------------------------------
// Combined loss
// ---------------------------------------------------------------------------

/// L = L2 + lambda * L_S with per-pixel gradient and diagonal Hessian fields.
inline LossResult total_loss_derivs(const Image& rendered, const Image& target,
                                    const LossConfig& config, bool want_hessian = true) {
    LossResult out = l2_loss_and_derivs(rendered, target);
    if (config.lambda == 0.0) return out;
    const SsimWindowStats stats = ssim_window_stats(rendered, target, config);
    const SsimResult ssim =
        ssim_value_and_derivs(stats, rendered, target, config, true, want_hessian);
    out.ssim_mean = ssim.ssim_mean;
    out.value = out.l2 + config.lambda * ssim.loss;
    for (std::size_t i = 0; i < out.derivs.grad.size(); ++i) {
        out.derivs.grad[i] += config.lambda * ssim.derivs.grad[i];
        if (want_hessian) out.derivs.hess[i] += config.lambda * ssim.derivs.hess[i];
    }
    return out;
}

/// Value-only path used for probe losses and metrics.
inline double total_loss_value(const Image& rendered, const Image& target,
                               const LossConfig& config) {
    if (!rendered.same_shape(target)) throw InvalidInput("loss: image dimensions differ");
    const double inv = 1.0 / (3.0 * rendered.pixel_count());
    double acc = 0.0;
    for (std::size_t i = 0; i < rendered.data.size(); ++i) {
        const double d = rendered.data[i] - target.data[i];
        acc += d * d;
    }
    double value = 0.5 * inv * acc;
    if (config.lambda != 0.0) {
        const SsimWindowStats stats = ssim_window_stats(rendered, target, config);
        const SsimResult ssim = ssim_value_and_derivs(stats, rendered, target, config, false);
        value += config.lambda * ssim.loss;
    }
    return value;
}

/// Mean SSIM map over channels and pixels; shared with the SSIM loss path.
inline double ssim_mean_value(const Image& rendered, const Image& target,
                              const LossConfig& config = LossConfig{}) {
    const SsimWindowStats stats = ssim_window_stats(rendered, target, config);
    return ssim_value_and_derivs(stats, rendered, target, config, false).ssim_mean;
}

}  // namespace ngs
