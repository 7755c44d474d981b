#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "ngs/core.hpp"
#include "ngs/synth.hpp"
#include "ngs/trainer.hpp"

namespace ngs {

// Comparative fixtures: a desk-scale miniature of full training runs. The
// standard fixture is 100 kernels, 8 training views plus 4 probe views at
// 64x64; the overshoot fixture swaps the camera layout for a 12-view ring.

struct BenchConfig {
    int seeds = 5;
    std::uint64_t seed_base = 1000;
    int threads = 1;
    int gd_iterations = 200;
    int newton_budget = 20;
    int overshoot_steps = 36;
    int order_steps = 48;
    // Secondary targets keep full resolution: at 64x64 a downsampled neighbor
    // loses exactly the detail octave the late training phase fights over,
    // which turns per-view Newton into a limit cycle.
    int secondary_downsample = 1;
    std::string out_dir;           // optional CSV dump location
};

inline SynthParams standard_fixture(std::uint64_t seed, CameraLayout layout = CameraLayout::sphere,
                                    int views = 8, int secondary_downsample = 1) {
    SynthParams p;
    p.seed = seed;
    p.kernels = 100;
    p.views = views;
    p.probe_views = 4;
    p.width = 64;
    p.height = 64;
    p.layout = layout;
    // Inside the regime where kernels stay resolvable after the scale jitter;
    // at 1.0 the x[0.5,2] per-axis jitter pushes many kernels below a pixel.
    p.perturbation = 0.5;
    // Matches BenchConfig::secondary_downsample so the trainer picks the
    // exact low-resolution ground truth instead of a box filter.
    p.secondary_downsample = secondary_downsample;
    return p;
}

inline TrainConfig bench_train_config(OptimizerKind optimizer, std::uint64_t seed,
                                      const BenchConfig& bench, int knn = kDefaultKnn) {
    TrainConfig config;
    config.optimizer = optimizer;
    config.seed = seed;
    config.knn = knn;
    config.secondary_downsample = bench.secondary_downsample;
    config.threads = bench.threads;
    config.probe_cadence = 1;
    return config;
}

inline void write_rows_csv(const std::string& path, const std::vector<IterationReport>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError("bench: cannot open " + path);
    os << "step,image_id,probe_loss,psnr,ssim,dt_ms\n";
    os.precision(17);
    for (const auto& r : rows) {
        os << r.step << ',' << r.image_id << ',' << r.probe_loss << ',' << r.probe_psnr << ','
           << r.probe_ssim << ',' << r.dt_ms << '\n';
    }
}

// ---------------------------------------------------------------------------
// Convergence comparison (newton vs gd) and per-iteration cost
// ---------------------------------------------------------------------------

struct ConvergenceSeed {
    std::uint64_t seed = 0;
    double gd_final_loss = 0.0;       // gd probe loss at the iteration budget
    int newton_steps_to_reach = -1;   // first newton step at or below it
    double newton_final_loss = 0.0;
    double gd_ms_per_iter = 0.0;
    double newton_ms_per_iter = 0.0;
};

struct ConvergenceResult {
    std::vector<ConvergenceSeed> seeds;
    double mean_cost_ratio = 0.0;
    bool converged_within_budget = true;
};

inline ConvergenceResult run_convergence_benchmark(const BenchConfig& bench) {
    ConvergenceResult result;
    double ratio_acc = 0.0;
    for (int s = 0; s < bench.seeds; ++s) {
        const std::uint64_t seed = bench.seed_base + s;
        const SynthResult synth = synth_scene(standard_fixture(seed));

        ConvergenceSeed row;
        row.seed = seed;

        TrainConfig gd = bench_train_config(OptimizerKind::gd, seed, bench);
        gd.epochs = (bench.gd_iterations + 7) / 8;
        Trainer gd_trainer(synth.init, synth.dataset, gd);
        const auto gd_rows = gd_trainer.run();
        row.gd_final_loss = gd_rows[std::min<std::size_t>(bench.gd_iterations,
                                                          gd_rows.size() - 1)]
                                .probe_loss;
        double gd_ms = 0.0;
        for (std::size_t i = 1; i < gd_rows.size(); ++i) gd_ms += gd_rows[i].dt_ms;
        row.gd_ms_per_iter = gd_ms / (gd_rows.size() - 1);

        TrainConfig newton = bench_train_config(OptimizerKind::newton, seed, bench);
        newton.epochs = (bench.newton_budget + 7) / 8;
        Trainer newton_trainer(synth.init, synth.dataset, newton);
        const auto newton_rows = newton_trainer.run();
        double newton_ms = 0.0;
        for (std::size_t i = 1; i < newton_rows.size(); ++i) {
            newton_ms += newton_rows[i].dt_ms;
            if (row.newton_steps_to_reach < 0 &&
                static_cast<int>(i) <= bench.newton_budget &&
                newton_rows[i].probe_loss <= row.gd_final_loss) {
                row.newton_steps_to_reach = static_cast<int>(i);
            }
        }
        row.newton_ms_per_iter = newton_ms / (newton_rows.size() - 1);
        row.newton_final_loss = newton_rows.back().probe_loss;
        result.converged_within_budget =
            result.converged_within_budget && row.newton_steps_to_reach > 0;
        ratio_acc += row.newton_ms_per_iter / row.gd_ms_per_iter;
        result.seeds.push_back(row);

        if (!bench.out_dir.empty()) {
            write_rows_csv(bench.out_dir + "/convergence_gd_" + std::to_string(seed) + ".csv",
                           gd_rows);
            write_rows_csv(bench.out_dir + "/convergence_newton_" + std::to_string(seed) + ".csv",
                           newton_rows);
        }
    }
    result.mean_cost_ratio = ratio_acc / bench.seeds;
    return result;
}

// ---------------------------------------------------------------------------
// Overshoot ablation: positive probe-loss spikes vs |N_t|
// ---------------------------------------------------------------------------

struct OvershootResult {
    std::array<int, 3> knn_values{0, 3, 8};
    std::array<double, 3> mean_spike{};  // mean positive probe-loss jump per step
};

inline double mean_positive_spike(const std::vector<IterationReport>& rows) {
    double acc = 0.0;
    int count = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        acc += std::max(0.0, rows[i].probe_loss - rows[i - 1].probe_loss);
        ++count;
    }
    return count > 0 ? acc / count : 0.0;
}

inline OvershootResult run_overshoot_benchmark(const BenchConfig& bench) {
    OvershootResult result;
    for (int ki = 0; ki < 3; ++ki) {
        double acc = 0.0;
        for (int s = 0; s < bench.seeds; ++s) {
            const std::uint64_t seed = bench.seed_base + s;
            // Full perturbation: the overshoot dynamics need strong per-view
            // mismatches for the spikes to stand clear of the noise floor.
            SynthParams ring = standard_fixture(seed, CameraLayout::ring, 12);
            ring.perturbation = 1.0;
            const SynthResult synth = synth_scene(ring);
            TrainConfig config = bench_train_config(OptimizerKind::newton, seed, bench,
                                                    result.knn_values[ki]);
            config.epochs = (bench.overshoot_steps + 11) / 12;
            Trainer trainer(synth.init, synth.dataset, config);
            auto rows = trainer.run();
            if (static_cast<int>(rows.size()) > bench.overshoot_steps + 1) {
                rows.resize(bench.overshoot_steps + 1);
            }
            acc += mean_positive_spike(rows);
            if (!bench.out_dir.empty()) {
                write_rows_csv(bench.out_dir + "/overshoot_k" +
                                   std::to_string(result.knn_values[ki]) + "_" +
                                   std::to_string(seed) + ".csv",
                               rows);
            }
        }
        result.mean_spike[ki] = acc / bench.seeds;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Attribute-order ablation
// ---------------------------------------------------------------------------

struct OrderSeed {
    std::uint64_t seed = 0;
    double position_first = 0.0;
    double color_first = 0.0;
    double rot_scale_swapped = 0.0;
};

struct OrderResult {
    std::vector<OrderSeed> seeds;
};

inline OrderResult run_order_benchmark(const BenchConfig& bench) {
    static const std::array<Attribute, 5> kColorFirst = {Attribute::color, Attribute::opacity,
                                                         Attribute::scaling, Attribute::rotation,
                                                         Attribute::position};
    static const std::array<Attribute, 5> kRotScaleSwap = {Attribute::position, Attribute::scaling,
                                                           Attribute::rotation, Attribute::opacity,
                                                           Attribute::color};
    OrderResult result;
    for (int s = 0; s < bench.seeds; ++s) {
        const std::uint64_t seed = bench.seed_base + s;
        const SynthResult synth = synth_scene(standard_fixture(seed));
        OrderSeed row;
        row.seed = seed;
        auto run_order = [&](const std::array<Attribute, 5>& order, const char* tag) {
            TrainConfig config = bench_train_config(OptimizerKind::newton, seed, bench);
            config.order = order;
            config.epochs = (bench.order_steps + 7) / 8;
            Trainer trainer(synth.init, synth.dataset, config);
            auto rows = trainer.run();
            if (static_cast<int>(rows.size()) > bench.order_steps + 1) {
                rows.resize(bench.order_steps + 1);
            }
            if (!bench.out_dir.empty()) {
                write_rows_csv(bench.out_dir + "/order_" + std::string(tag) + "_" +
                                   std::to_string(seed) + ".csv",
                               rows);
            }
            return rows.back().probe_loss;
        };
        row.position_first = run_order(TrainConfig{}.order, "default");
        row.color_first = run_order(kColorFirst, "color_first");
        row.rot_scale_swapped = run_order(kRotScaleSwap, "rot_scale_swap");
        result.seeds.push_back(row);
    }
    return result;
}

}  // namespace ngs
