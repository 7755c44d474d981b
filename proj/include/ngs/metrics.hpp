#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "ngs/core.hpp"
#include "ngs/image.hpp"
#include "ngs/loss.hpp"

namespace ngs {

/// PSNR in dB over all pixels and channels; identical images report +inf.
inline double psnr(const Image& rendered, const Image& target) {
    if (!rendered.same_shape(target)) throw InvalidInput("psnr: image dimensions differ");
    double mse = 0.0;
    for (std::size_t i = 0; i < rendered.data.size(); ++i) {
        const double d = rendered.data[i] - target.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(rendered.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return -10.0 * std::log10(mse);
}

/// Mean SSIM over channels; same code path as the SSIM loss.
inline double ssim_metric(const Image& rendered, const Image& target,
                          const LossConfig& config = LossConfig{}) {
    return ssim_mean_value(rendered, target, config);
}

struct ViewMetrics {
    int view = -1;
    double psnr = 0.0;
    double ssim = 1.0;
    double loss = 0.0;
};

struct MetricsReport {
    std::vector<ViewMetrics> views;
    double mean_psnr = 0.0;
    double mean_ssim = 1.0;
    double mean_loss = 0.0;

    void finalize() {
        if (views.empty()) return;
        mean_psnr = mean_ssim = mean_loss = 0.0;
        for (const auto& v : views) {
            mean_psnr += v.psnr;
            mean_ssim += v.ssim;
            mean_loss += v.loss;
        }
        mean_psnr /= views.size();
        mean_ssim /= views.size();
        mean_loss /= views.size();
    }
};

}  // namespace ngs
