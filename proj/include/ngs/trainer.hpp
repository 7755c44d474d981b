#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ngs/camera.hpp"
#include "ngs/core.hpp"
#include "ngs/loss.hpp"
#include "ngs/metrics.hpp"
#include "ngs/newton.hpp"
#include "ngs/rasterizer.hpp"
#include "ngs/scene.hpp"
#include "ngs/scene_io.hpp"
#include "ngs/secondary.hpp"

namespace ngs {

enum class OptimizerKind { newton, gd, adam };

inline const char* optimizer_name(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::newton: return "newton";
        case OptimizerKind::gd: return "gd";
        case OptimizerKind::adam: return "adam";
    }
    return "?";
}

/// Per-attribute learning rates for the first-order baselines. The Newton
/// path takes unit steps and never reads these. Plain gradient descent sees
/// loss-normalized gradients (1/(3N) per pixel), so its stable rates are
/// orders of magnitude above the Adam ones, which mirror common
/// splat-training defaults.
struct LearningRates {
    double position = 2.0;
    double rotation = 40.0;
    double scaling = 1.0;
    double opacity = 24.0;
    double color = 60.0;

    static LearningRates adam_defaults() {
        LearningRates lr;
        lr.position = 1.6e-4;
        lr.rotation = 1.0e-3;
        lr.scaling = 5.0e-3;
        lr.opacity = 2.5e-2;
        lr.color = 2.5e-3;
        return lr;
    }
};

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::newton;
    std::array<Attribute, 5> order = {Attribute::position, Attribute::rotation, Attribute::scaling,
                                      Attribute::opacity, Attribute::color};
    int epochs = 1;
    std::uint64_t seed = 0;
    LossConfig loss;
    int knn = kDefaultKnn;
    int secondary_downsample = kDefaultSecondaryDownsample;
    LearningRates gd_lr;                                       // calibrated, see LearningRates
    LearningRates adam_lr = LearningRates::adam_defaults();    // usual Adam magnitudes
    int probe_cadence = 1;
    int threads = 1;
    NewtonOptions newton;
    double barrier_decay = 0.5;
    double barrier_floor = 1e-6;
    RasterOptions raster;
    std::string checkpoint_dir;
    std::string dump_hessian_path;

    void validate() const {
        loss.validate();
        std::array<bool, 5> seen{};
        for (Attribute a : order) seen[static_cast<int>(a)] = true;
        for (bool s : seen) {
            if (!s) throw InvalidInput("train config: order must be a permutation of all five");
        }
        if (epochs < 0) throw InvalidInput("train config: epochs must be >= 0");
        if (knn < 0) throw InvalidInput("train config: knn must be >= 0");
    }
};

struct IterationReport {
    int step = 0;
    int image_id = -1;
    double probe_loss = 0.0;
    double probe_psnr = 0.0;
    double probe_ssim = 1.0;
    std::array<double, 5> delta_norms{};  // indexed by Attribute
    double dt_ms = 0.0;
};

// ---------------------------------------------------------------------------
// First-order update rules (shared by the baselines, unit-testable)
// ---------------------------------------------------------------------------

inline double gd_update(double grad, double lr) { return -lr * grad; }

struct AdamState {
    VecX m, v;
    int t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    explicit AdamState(int n = 0) : m(VecX::Zero(n)), v(VecX::Zero(n)) {}

    void begin_step() { ++t; }

    double update(int i, double grad, double lr) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad;
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad * grad;
        const double mh = m[i] / (1.0 - std::pow(beta1, t));
        const double vh = v[i] / (1.0 - std::pow(beta2, t));
        return -lr * mh / (std::sqrt(vh) + eps);
    }
};

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

class Trainer {
public:
    Trainer(Scene scene, Dataset dataset, TrainConfig config)
        : scene_(std::move(scene)), dataset_(std::move(dataset)), config_(std::move(config)),
          rng_(config_.seed) {
        config_.validate();
        if (dataset_.cameras.empty()) throw InvalidInput("trainer: dataset has no cameras");
        if (dataset_.train_ids.empty()) throw InvalidInput("trainer: no training views");
        validate_scene(scene_);
        config_.raster.threads = config_.threads;
        barrier_weight_ = config_.newton.barrier_weight;

        // Camera sphere and KNN sets are fixed at startup; poses never move.
        sphere_ = fit_bounding_sphere(scene_);
        std::vector<Camera> train_cams;
        for (int id : dataset_.train_ids) train_cams.push_back(dataset_.cameras[id]);
        const SecondaryTargetSet knn = knn_views(train_cams, sphere_, config_.knn);
        neighbors_.assign(dataset_.cameras.size(), {});
        for (std::size_t i = 0; i < dataset_.train_ids.size(); ++i) {
            for (int local : knn.neighbors[i]) {
                neighbors_[dataset_.train_ids[i]].push_back(dataset_.train_ids[local]);
            }
        }
        down_cameras_.reserve(dataset_.cameras.size());
        down_targets_.reserve(dataset_.cameras.size());
        const bool exact_low_res =
            dataset_.secondary_downsample == config_.secondary_downsample &&
            dataset_.secondary_targets.size() == dataset_.cameras.size();
        for (std::size_t i = 0; i < dataset_.cameras.size(); ++i) {
            const int f = clamp_downsample_factor(dataset_.cameras[i], config_.secondary_downsample);
            down_cameras_.push_back(make_downsampled_camera(dataset_.cameras[i], f));
            // Exact low-resolution ground truth beats a box filter when the
            // dataset provides it (synthetic fixtures do).
            if (exact_low_res &&
                dataset_.secondary_targets[i].width == down_cameras_.back().width &&
                dataset_.secondary_targets[i].height == down_cameras_.back().height) {
                down_targets_.push_back(dataset_.secondary_targets[i]);
            } else {
                down_targets_.push_back(downsample_box(dataset_.targets[i], f));
            }
        }

        adam_position_ = AdamState(3 * kernel_count());
        adam_rotation_ = AdamState(kernel_count());
        adam_scaling_ = AdamState(3 * kernel_count());
        adam_opacity_ = AdamState(kernel_count());
        adam_color_ = AdamState(48 * kernel_count());
    }

    const Scene& scene() const { return scene_; }
    const Dataset& dataset() const { return dataset_; }
    const std::vector<std::vector<int>>& neighbors() const { return neighbors_; }
    int step_count() const { return step_count_; }
    double barrier_weight() const { return barrier_weight_; }

    /// One optimizer step on a single training view. dt_ms covers the
    /// optimizer work only, probe metrics are filled in by run().
    IterationReport step(int view_id) {
        if (!std::isfinite(probe_loss_cache_)) {
            throw NumericalError("trainer: non-finite probe loss, aborting");
        }
        IterationReport report;
        report.image_id = view_id;
        const auto t0 = std::chrono::steady_clock::now();
        switch (config_.optimizer) {
            case OptimizerKind::newton: newton_step(view_id, report); break;
            case OptimizerKind::gd: first_order_step(view_id, report, false); break;
            case OptimizerKind::adam: first_order_step(view_id, report, true); break;
        }
        const auto t1 = std::chrono::steady_clock::now();
        report.dt_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        report.step = ++step_count_;
        for (double d : report.delta_norms) {
            if (!std::isfinite(d)) {
                maybe_dump_systems();
                throw NumericalError("trainer: non-finite update, aborting");
            }
        }
        return report;
    }

    struct ProbeMetrics {
        double loss = 0.0;
        double psnr = 0.0;
        double ssim = 1.0;
    };

    ProbeMetrics probe_metrics() {
        ProbeMetrics out;
        out.loss = out.psnr = 0.0;
        out.ssim = 0.0;
        const auto& ids = dataset_.probe_ids.empty() ? dataset_.train_ids : dataset_.probe_ids;
        for (int id : ids) {
            const Image img = render(scene_, dataset_.cameras[id], config_.raster).image;
            out.loss += total_loss_value(img, dataset_.targets[id], config_.loss);
            const double p = psnr(img, dataset_.targets[id]);
            out.psnr += std::isinf(p) ? 99.0 : p;
            out.ssim += ssim_metric(img, dataset_.targets[id], config_.loss);
        }
        const double n = static_cast<double>(ids.size());
        out.loss /= n;
        out.psnr /= n;
        out.ssim /= n;
        probe_loss_cache_ = out.loss;
        return out;
    }

    /// Runs the configured number of epochs. Rows: one initial probe row
    /// (step 0) followed by one row per step; dt_ms is excluded from the
    /// determinism contract.
    std::vector<IterationReport> run(std::ostream* csv = nullptr) {
        std::vector<IterationReport> rows;
        if (csv) *csv << "step,image_id,probe_loss,psnr,ssim,dt_ms\n";
        IterationReport initial;
        const ProbeMetrics m0 = probe_metrics();
        initial.probe_loss = m0.loss;
        initial.probe_psnr = m0.psnr;
        initial.probe_ssim = m0.ssim;
        rows.push_back(initial);
        if (csv) write_csv_row(*csv, initial);

        ProbeMetrics last = m0;
        for (int epoch = 0; epoch < config_.epochs; ++epoch) {
            std::vector<int> order = dataset_.train_ids;
            rng_.shuffle(order);
            for (int view_id : order) {
                IterationReport report = step(view_id);
                if (config_.probe_cadence > 0 && step_count_ % config_.probe_cadence == 0) {
                    last = probe_metrics();
                }
                report.probe_loss = last.loss;
                report.probe_psnr = last.psnr;
                report.probe_ssim = last.ssim;
                rows.push_back(report);
                if (csv) write_csv_row(*csv, report);
            }
            barrier_weight_ = std::max(config_.barrier_floor,
                                       barrier_weight_ * config_.barrier_decay);
            if (!config_.checkpoint_dir.empty()) {
                namespace fs = std::filesystem;
                fs::create_directories(config_.checkpoint_dir);
                save_scene((fs::path(config_.checkpoint_dir) /
                            ("epoch_" + std::to_string(epoch) + ".json"))
                               .string(),
                           scene_);
            }
        }
        maybe_dump_systems();
        return rows;
    }

private:
    int kernel_count() const { return static_cast<int>(scene_.kernels.size()); }

    static void write_csv_row(std::ostream& os, const IterationReport& r) {
        os << r.step << ',' << r.image_id << ',';
        const auto old = os.precision(17);
        os << r.probe_loss << ',' << r.probe_psnr << ',' << r.probe_ssim;
        os.precision(old);
        os << ',' << r.dt_ms << '\n';
    }

    ViewContext build_primary(int view_id, bool want_hessian) {
        return build_view_context(scene_, dataset_.cameras[view_id], dataset_.targets[view_id],
                                  config_.raster, config_.loss, want_hessian);
    }

    static bool is_geometry(Attribute a) {
        return a == Attribute::position || a == Attribute::rotation || a == Attribute::scaling;
    }

    void newton_step(int view_id, IterationReport& report) {
        NewtonOptions options = config_.newton;
        options.barrier_weight = barrier_weight_;

        // Primary and secondary captures are refreshed together after every
        // geometry-affecting commit. Reusing one secondary render for the
        // whole step leaves their gradients pointing at pre-commit state,
        // which measurably destabilizes training at these scales.
        std::vector<ViewContext> secondary;
        std::vector<const ViewContext*> sec_ptrs;
        auto build_secondaries = [&] {
            snapshot_ = scene_;
            secondary.clear();
            sec_ptrs.clear();
            secondary.reserve(neighbors_[view_id].size());
            for (int j : neighbors_[view_id]) {
                secondary.push_back(build_view_context(snapshot_, down_cameras_[j],
                                                       down_targets_[j], config_.raster,
                                                       config_.loss, true));
            }
            for (const auto& ctx : secondary) sec_ptrs.push_back(&ctx);
        };
        build_secondaries();

        ViewContext primary = build_primary(view_id, true);
        const int n = kernel_count();
        const bool collect = !config_.dump_hessian_path.empty() && collected_systems_.empty();

        for (std::size_t pass = 0; pass < config_.order.size(); ++pass) {
            const Attribute attr = config_.order[pass];
            double delta_norm_sq = 0.0;
            switch (attr) {
                case Attribute::position: {
                    std::vector<PositionSolve> solves(n);
                    parallel_for(n, config_.threads, [&](std::size_t lo, std::size_t hi) {
                        for (std::size_t k = lo; k < hi; ++k) {
                            solves[k] = solve_position(scene_, static_cast<int>(k), primary,
                                                       ViewSpan(sec_ptrs), options);
                        }
                    });
                    for (int k = 0; k < n; ++k) {
                        commit_position(scene_.kernels[k], solves[k]);
                        delta_norm_sq += solves[k].delta_position.squaredNorm();
                        if (collect) collected_systems_.push_back(solves[k].sys);
                    }
                    break;
                }
                case Attribute::rotation: {
                    std::vector<RotationSolve> solves(n);
                    parallel_for(n, config_.threads, [&](std::size_t lo, std::size_t hi) {
                        for (std::size_t k = lo; k < hi; ++k) {
                            solves[k] = solve_rotation(scene_, static_cast<int>(k), primary,
                                                       ViewSpan(sec_ptrs), options);
                        }
                    });
                    for (int k = 0; k < n; ++k) {
                        commit_rotation(scene_.kernels[k], solves[k]);
                        delta_norm_sq += solves[k].theta * solves[k].theta;
                        if (collect) collected_systems_.push_back(solves[k].sys);
                    }
                    break;
                }
                case Attribute::scaling: {
                    std::vector<ScalingSolve> solves(n);
                    parallel_for(n, config_.threads, [&](std::size_t lo, std::size_t hi) {
                        for (std::size_t k = lo; k < hi; ++k) {
                            solves[k] = solve_scaling(scene_, static_cast<int>(k), primary,
                                                      ViewSpan(sec_ptrs), options);
                        }
                    });
                    for (int k = 0; k < n; ++k) {
                        commit_scaling(scene_.kernels[k], solves[k]);
                        delta_norm_sq += solves[k].delta_scale.squaredNorm();
                        if (collect) collected_systems_.push_back(solves[k].sys);
                    }
                    break;
                }
                case Attribute::opacity: {
                    std::vector<OpacitySolve> solves(n);
                    parallel_for(n, config_.threads, [&](std::size_t lo, std::size_t hi) {
                        for (std::size_t k = lo; k < hi; ++k) {
                            solves[k] = solve_opacity(scene_, static_cast<int>(k), primary,
                                                      ViewSpan(sec_ptrs), options);
                        }
                    });
                    for (int k = 0; k < n; ++k) {
                        const double before = scene_.kernels[k].sigma;
                        commit_opacity(scene_.kernels[k], solves[k]);
                        const double d = scene_.kernels[k].sigma - before;
                        delta_norm_sq += d * d;
                        if (collect) collected_systems_.push_back(solves[k].sys);
                    }
                    break;
                }
                case Attribute::color: {
                    std::vector<ColorSolve> solves(n);
                    parallel_for(n, config_.threads, [&](std::size_t lo, std::size_t hi) {
                        for (std::size_t k = lo; k < hi; ++k) {
                            solves[k] = solve_color(scene_, static_cast<int>(k), primary,
                                                    ViewSpan(sec_ptrs), options);
                        }
                    });
                    for (int k = 0; k < n; ++k) {
                        commit_color(scene_.kernels[k], solves[k], scene_.sh_degree);
                        for (int ch = 0; ch < 3; ++ch) {
                            delta_norm_sq += solves[k].delta[ch].squaredNorm();
                            if (collect) collected_systems_.push_back(solves[k].sys[ch]);
                        }
                    }
                    break;
                }
            }
            report.delta_norms[static_cast<int>(attr)] = std::sqrt(delta_norm_sq);
            if (is_geometry(attr) && pass + 1 < config_.order.size()) {
                primary = build_primary(view_id, true);
                build_secondaries();
            }
        }
    }

    void first_order_step(int view_id, IterationReport& report, bool adam) {
        const ViewContext ctx = build_primary(view_id, false);
        const int n = kernel_count();
        const LearningRates& lr = adam ? config_.adam_lr : config_.gd_lr;
        if (adam) {
            adam_position_.begin_step();
            adam_rotation_.begin_step();
            adam_scaling_.begin_step();
            adam_opacity_.begin_step();
            adam_color_.begin_step();
        }

        // All gradients are evaluated on the same snapshot, then applied.
        struct Grads {
            Vec3 position = Vec3::Zero();
            double theta = 0.0;
            Vec3 axis = Vec3::UnitZ();
            Vec3 scale = Vec3::Zero();
            double sigma = 0.0;
            std::array<VecX, 3> color;
        };
        std::vector<Grads> grads(n);
        parallel_for(n, config_.threads, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t k = lo; k < hi; ++k) {
                Grads& g = grads[k];
                g.position = position_terms(static_cast<int>(k), ctx, false).grad;
                g.axis = view_direction(ctx.camera, scene_.kernels[k].position);
                g.theta = rotation_terms(static_cast<int>(k), g.axis, ctx, false).grad;
                g.scale = scaling_gradient_s(static_cast<int>(k), ctx);
                g.sigma = opacity_data_terms(static_cast<int>(k), ctx, false).grad;
                const ColorTerms c = color_terms(static_cast<int>(k), ctx, false);
                for (int ch = 0; ch < 3; ++ch) g.color[ch] = c.grad[ch];
            }
        });

        std::array<double, 5> norms_sq{};
        const int n_sh = sh_coeff_count(scene_.sh_degree);
        for (int k = 0; k < n; ++k) {
            GaussianKernel& kernel = scene_.kernels[k];
            const Grads& g = grads[k];

            Vec3 dp;
            double dtheta;
            Vec3 ds;
            double dsigma;
            if (adam) {
                for (int c = 0; c < 3; ++c) {
                    dp[c] = adam_position_.update(3 * k + c, g.position[c], lr.position);
                    ds[c] = adam_scaling_.update(3 * k + c, g.scale[c], lr.scaling);
                }
                dtheta = adam_rotation_.update(k, g.theta, lr.rotation);
                dsigma = adam_opacity_.update(k, g.sigma, lr.opacity);
            } else {
                dp = Vec3(gd_update(g.position[0], lr.position), gd_update(g.position[1], lr.position),
                          gd_update(g.position[2], lr.position));
                ds = Vec3(gd_update(g.scale[0], lr.scaling), gd_update(g.scale[1], lr.scaling),
                          gd_update(g.scale[2], lr.scaling));
                dtheta = gd_update(g.theta, lr.rotation);
                dsigma = gd_update(g.sigma, lr.opacity);
            }

            kernel.position += dp;
            norms_sq[static_cast<int>(Attribute::position)] += dp.squaredNorm();

            const Vec4 dq = axis_rotation_quaternion(dtheta, g.axis);
            kernel.quaternion = renormalize_quaternion(quaternion_multiply(dq, kernel.quaternion));
            norms_sq[static_cast<int>(Attribute::rotation)] += dtheta * dtheta;

            for (int c = 0; c < 3; ++c) {
                kernel.scale[c] = std::max(1e-8, kernel.scale[c] + ds[c]);
            }
            norms_sq[static_cast<int>(Attribute::scaling)] += ds.squaredNorm();

            const double before = kernel.sigma;
            kernel.sigma = std::clamp(kernel.sigma + dsigma, std::nextafter(kSigmaMargin, 1.0),
                                      std::nextafter(1.0 - kSigmaMargin, 0.0));
            const double applied = kernel.sigma - before;
            norms_sq[static_cast<int>(Attribute::opacity)] += applied * applied;

            for (int ch = 0; ch < 3; ++ch) {
                for (int c = 0; c < n_sh; ++c) {
                    const double dcol =
                        adam ? adam_color_.update(48 * k + 16 * ch + c, g.color[ch][c], lr.color)
                             : gd_update(g.color[ch][c], lr.color);
                    kernel.sh[ch][c] += dcol;
                    norms_sq[static_cast<int>(Attribute::color)] += dcol * dcol;
                }
            }
        }
        for (int i = 0; i < 5; ++i) report.delta_norms[i] = std::sqrt(norms_sq[i]);
    }

    void maybe_dump_systems() {
        if (config_.dump_hessian_path.empty() || collected_systems_.empty() || dumped_) return;
        std::ofstream os(config_.dump_hessian_path);
        if (!os) throw IoError("trainer: cannot open hessian dump " + config_.dump_hessian_path);
        dump_systems_csv(os, collected_systems_);
        dumped_ = true;
    }

    Scene scene_;
    Scene snapshot_;
    Dataset dataset_;
    TrainConfig config_;
    Rng rng_;
    CameraSphere sphere_;
    std::vector<std::vector<int>> neighbors_;
    std::vector<Camera> down_cameras_;
    std::vector<Image> down_targets_;
    double barrier_weight_ = 1e-4;
    int step_count_ = 0;
    double probe_loss_cache_ = 0.0;
    std::vector<LocalNewtonSystem> collected_systems_;
    bool dumped_ = false;

    AdamState adam_position_, adam_rotation_, adam_scaling_, adam_opacity_, adam_color_;
};

}  // namespace ngs
