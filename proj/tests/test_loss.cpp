#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ngs/fd.hpp"
#include "ngs/loss.hpp"
#include "test_util.hpp"

using namespace ngs;

namespace {

Image random_image(Rng& rng, int w, int h) {
    Image img(w, h);
    for (auto& v : img.data) v = rng.uniform(0.05, 0.95);
    return img;
}

/// Direct 11x11 weighted-sum oracle with per-center renormalization.
struct DirectStats {
    double mu, mu_t, var, var_t, cov;
};

DirectStats direct_window_stats(const Image& rendered, const Image& target, int cx, int cy, int ch,
                                const LossConfig& config) {
    const int half = config.window / 2;
    std::vector<double> w1(config.window);
    double s = 0.0;
    for (int i = 0; i < config.window; ++i) {
        const double d = i - half;
        w1[i] = std::exp(-d * d / (2.0 * config.window_sigma * config.window_sigma));
        s += w1[i];
    }
    for (auto& v : w1) v /= s;

    double wsum = 0.0, mu = 0.0, mu_t = 0.0;
    for (int j = -half; j <= half; ++j) {
        for (int i = -half; i <= half; ++i) {
            const int x = cx + i, y = cy + j;
            if (x < 0 || x >= rendered.width || y < 0 || y >= rendered.height) continue;
            const double w = w1[i + half] * w1[j + half];
            wsum += w;
            mu += w * rendered.at(x, y, ch);
            mu_t += w * target.at(x, y, ch);
        }
    }
    mu /= wsum;
    mu_t /= wsum;
    double var = 0.0, var_t = 0.0, cov = 0.0;
    for (int j = -half; j <= half; ++j) {
        for (int i = -half; i <= half; ++i) {
            const int x = cx + i, y = cy + j;
            if (x < 0 || x >= rendered.width || y < 0 || y >= rendered.height) continue;
            const double w = w1[i + half] * w1[j + half] / wsum;
            var += w * (rendered.at(x, y, ch) - mu) * (rendered.at(x, y, ch) - mu);
            var_t += w * (target.at(x, y, ch) - mu_t) * (target.at(x, y, ch) - mu_t);
            cov += w * (rendered.at(x, y, ch) - mu) * (target.at(x, y, ch) - mu_t);
        }
    }
    return {mu, mu_t, var, var_t, cov};
}

}  // namespace

TEST_CASE("l2 loss on identical images") {
    Rng rng(3);
    const Image img = random_image(rng, 16, 12);
    const LossResult r = l2_loss_and_derivs(img, img);
    CHECK(r.value == 0.0);
    for (double g : r.derivs.grad) CHECK(g == 0.0);
}

TEST_CASE("l2 gradient matches the printed substitution example") {
    Image rendered(10, 10, 0.0);
    Image target(10, 10, 0.0);
    rendered.at(4, 7, 0) = 0.3;
    const LossResult r = l2_loss_and_derivs(rendered, target);
    CHECK(r.derivs.g(4, 7)[0] == doctest::Approx(0.001).epsilon(1e-14));
    CHECK(r.derivs.g(4, 7)[1] == 0.0);
    CHECK(r.value == doctest::Approx(0.3 * 0.3 / (6.0 * 100.0)).epsilon(1e-14));
}

TEST_CASE("l2 hessian is the constant I3/(3N)") {
    Rng rng(5);
    const Image a = random_image(rng, 14, 14);
    const Image b = random_image(rng, 14, 14);
    const LossResult r = l2_loss_and_derivs(a, b);
    const double expect = 1.0 / (3.0 * 14 * 14);
    for (double h : r.derivs.hess) CHECK(h == expect);
}

TEST_CASE("l2 rejects mismatched shapes") {
    CHECK_THROWS_AS(l2_loss_and_derivs(Image(8, 8), Image(8, 9)), InvalidInput);
}

TEST_CASE("ssim stats of a constant image") {
    LossConfig config;
    Image img(16, 16, 0.42);
    Image target(16, 16, 0.42);
    const SsimWindowStats stats = ssim_window_stats(img, target, config);
    for (int i = 0; i < 16 * 16; ++i) {
        CHECK(stats.mu[0][i] == doctest::Approx(0.42).epsilon(1e-14));
        CHECK(stats.var[0][i] == doctest::Approx(0.0));
    }
}

TEST_CASE("ssim stats of identical images tie variance and covariance") {
    Rng rng(7);
    LossConfig config;
    const Image img = random_image(rng, 20, 16);
    const SsimWindowStats stats = ssim_window_stats(img, img, config);
    for (int ch = 0; ch < 3; ++ch) {
        for (std::size_t i = 0; i < stats.mu[ch].size(); ++i) {
            CHECK(stats.mu[ch][i] == doctest::Approx(stats.mu_t[ch][i]).epsilon(1e-14));
            CHECK(std::abs(stats.cov[ch][i] - stats.var[ch][i]) < 1e-14);
        }
    }
}

TEST_CASE("ssim stats match the direct weighted-sum oracle including borders") {
    Rng rng(11);
    LossConfig config;
    const Image rendered = random_image(rng, 24, 18);
    const Image target = random_image(rng, 24, 18);
    const SsimWindowStats stats = ssim_window_stats(rendered, target, config);
    for (int ch = 0; ch < 3; ++ch) {
        for (int y : {0, 1, 5, 8, 17}) {
            for (int x : {0, 2, 11, 22, 23}) {
                const DirectStats oracle = direct_window_stats(rendered, target, x, y, ch, config);
                const std::size_t i = static_cast<std::size_t>(y) * 24 + x;
                CHECK(std::abs(stats.mu[ch][i] - oracle.mu) < 1e-12);
                CHECK(std::abs(stats.mu_t[ch][i] - oracle.mu_t) < 1e-12);
                CHECK(std::abs(stats.var[ch][i] - oracle.var) < 1e-12);
                CHECK(std::abs(stats.var_t[ch][i] - oracle.var_t) < 1e-12);
                CHECK(std::abs(stats.cov[ch][i] - oracle.cov) < 1e-12);
            }
        }
    }
}

TEST_CASE("ssim stats reject undersized images") {
    LossConfig config;
    CHECK_THROWS_AS(ssim_window_stats(Image(10, 16), Image(10, 16), config), InvalidInput);
}

TEST_CASE("ssim of identical images is exactly one with zero gradient") {
    Rng rng(13);
    LossConfig config;
    const Image img = random_image(rng, 24, 24);
    const SsimWindowStats stats = ssim_window_stats(img, img, config);
    const SsimResult r = ssim_value_and_derivs(stats, img, img, config);
    CHECK(r.ssim_mean == doctest::Approx(1.0).epsilon(1e-13));
    CHECK(r.loss == doctest::Approx(0.0));
    for (double g : r.derivs.grad) CHECK(std::abs(g) < 1e-14);
}

TEST_CASE("ssim gradient and diagonal hessian match finite differences") {
    Rng rng(17);
    LossConfig config;
    const Image target = random_image(rng, 32, 32);
    Image rendered = random_image(rng, 32, 32);

    const SsimWindowStats stats = ssim_window_stats(rendered, target, config);
    const SsimResult r = ssim_value_and_derivs(stats, rendered, target, config);

    auto loss_at = [&](int x, int y, int ch, double value) {
        Image probe = rendered;
        probe.at(x, y, ch) = value;
        const SsimWindowStats s = ssim_window_stats(probe, target, config);
        return ssim_value_and_derivs(s, probe, target, config, false).loss;
    };

    Rng pick(19);
    for (int trial = 0; trial < 12; ++trial) {
        const int x = pick.index(32);
        const int y = pick.index(32);
        const int ch = pick.index(3);
        const double v = rendered.at(x, y, ch);
        const double h = 1e-4;
        const double fd_g = (loss_at(x, y, ch, v + h) - loss_at(x, y, ch, v - h)) / (2 * h);
        CHECK(fd::rel_error(r.derivs.g(x, y)[ch], fd_g, 1e-10) < 1e-4);
        const double fd_h =
            (loss_at(x, y, ch, v + h) - 2.0 * loss_at(x, y, ch, v) + loss_at(x, y, ch, v - h)) /
            (h * h);
        CHECK(fd::rel_error(r.derivs.h(x, y)[ch], fd_h, 1e-8) < 1e-3);
    }
}

TEST_CASE("total loss with lambda zero reduces to l2") {
    Rng rng(23);
    LossConfig config;
    config.lambda = 0.0;
    const Image a = random_image(rng, 16, 16);
    const Image b = random_image(rng, 16, 16);
    const LossResult total = total_loss_derivs(a, b, config);
    const LossResult l2 = l2_loss_and_derivs(a, b);
    CHECK(total.value == l2.value);
    CHECK(total.derivs.grad == l2.derivs.grad);
}

TEST_CASE("total loss value and gradient match finite differences") {
    Rng rng(29);
    LossConfig config;  // lambda 0.2
    const Image target = random_image(rng, 24, 24);
    Image rendered = random_image(rng, 24, 24);
    const LossResult r = total_loss_derivs(rendered, target, config);
    CHECK(r.value == doctest::Approx(total_loss_value(rendered, target, config)).epsilon(1e-13));

    Rng pick(31);
    for (int trial = 0; trial < 8; ++trial) {
        const int x = pick.index(24);
        const int y = pick.index(24);
        const int ch = pick.index(3);
        const double h = 1e-4;
        Image probe = rendered;
        probe.at(x, y, ch) += h;
        const double lp = total_loss_value(probe, target, config);
        probe.at(x, y, ch) -= 2 * h;
        const double lm = total_loss_value(probe, target, config);
        CHECK(fd::rel_error(r.derivs.g(x, y)[ch], (lp - lm) / (2 * h), 1e-10) < 1e-4);
    }
}

TEST_CASE("identical images are a stationary point of the total loss") {
    Rng rng(37);
    LossConfig config;
    const Image img = random_image(rng, 20, 20);
    const LossResult r = total_loss_derivs(img, img, config);
    CHECK(r.value == doctest::Approx(0.0));
    for (double g : r.derivs.grad) CHECK(std::abs(g) < 1e-14);
}

TEST_CASE("window stats invariants hold on random pairs") {
    Rng rng(41);
    LossConfig config;
    for (int trial = 0; trial < 5; ++trial) {
        const Image a = random_image(rng, 16 + trial, 16);
        const Image b = random_image(rng, 16 + trial, 16);
        const SsimWindowStats stats = ssim_window_stats(a, b, config);
        for (int ch = 0; ch < 3; ++ch) {
            for (double v : stats.var[ch]) CHECK(v >= 0.0);
            for (double v : stats.var_t[ch]) CHECK(v >= 0.0);
        }
    }
}
