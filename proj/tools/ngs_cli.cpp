// Command-line front end: train, render, synth, check-grad and bench.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "ngs/bench.hpp"
#include "ngs/check.hpp"
#include "ngs/metrics.hpp"
#include "ngs/scene_io.hpp"
#include "ngs/synth.hpp"
#include "ngs/trainer.hpp"

namespace {

using namespace ngs;

std::uint64_t env_u64(const char* name, std::uint64_t fallback) {
    const char* v = std::getenv(name);
    return v ? std::strtoull(v, nullptr, 10) : fallback;
}

int env_int(const char* name, int fallback) {
    const char* v = std::getenv(name);
    return v ? std::atoi(v) : fallback;
}

Attribute parse_attribute(const std::string& token) {
    if (token == "pos" || token == "position") return Attribute::position;
    if (token == "rot" || token == "rotation") return Attribute::rotation;
    if (token == "scale" || token == "scaling") return Attribute::scaling;
    if (token == "opacity") return Attribute::opacity;
    if (token == "color") return Attribute::color;
    throw InvalidInput("unknown attribute '" + token + "' in --order");
}

std::array<Attribute, 5> parse_order(const std::string& order) {
    std::array<Attribute, 5> out{};
    std::stringstream ss(order);
    std::string token;
    int i = 0;
    while (std::getline(ss, token, ',')) {
        if (i >= 5) throw InvalidInput("--order must list exactly five attributes");
        out[i++] = parse_attribute(token);
    }
    if (i != 5) throw InvalidInput("--order must list exactly five attributes");
    return out;
}

OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "newton") return OptimizerKind::newton;
    if (name == "gd") return OptimizerKind::gd;
    if (name == "adam") return OptimizerKind::adam;
    throw InvalidInput("unknown optimizer '" + name + "'");
}

nlohmann::json config_json(const TrainConfig& config) {
    nlohmann::json j;
    j["optimizer"] = optimizer_name(config.optimizer);
    std::vector<std::string> order;
    for (Attribute a : config.order) order.push_back(attribute_name(a));
    j["order"] = order;
    j["epochs"] = config.epochs;
    j["seed"] = config.seed;
    j["lambda"] = config.loss.lambda;
    j["knn"] = config.knn;
    j["secondary_downsample"] = config.secondary_downsample;
    j["probe_cadence"] = config.probe_cadence;
    j["threads"] = config.threads;
    j["barrier_weight"] = config.newton.barrier_weight;
    j["gd_lr"] = {{"position", config.gd_lr.position},
                  {"rotation", config.gd_lr.rotation},
                  {"scaling", config.gd_lr.scaling},
                  {"opacity", config.gd_lr.opacity},
                  {"color", config.gd_lr.color}};
    j["adam_lr"] = {{"position", config.adam_lr.position},
                    {"rotation", config.adam_lr.rotation},
                    {"scaling", config.adam_lr.scaling},
                    {"opacity", config.adam_lr.opacity},
                    {"color", config.adam_lr.color}};
    return j;
}

int cmd_train(const std::string& scene_path, const std::string& dataset_path,
              TrainConfig config, const std::string& log_path, const std::string& out_path) {
    Scene scene = load_scene(scene_path);
    Dataset dataset = load_dataset(dataset_path);
    Trainer trainer(std::move(scene), std::move(dataset), config);

    std::ofstream csv;
    if (!log_path.empty()) {
        csv.open(log_path);
        if (!csv) throw IoError("train: cannot open log " + log_path);
        std::ofstream cfg(log_path + ".config.json");
        cfg << config_json(config).dump(1) << '\n';
    }
    const auto rows = trainer.run(log_path.empty() ? nullptr : &csv);
    const auto& last = rows.back();
    std::printf("steps=%d probe_loss=%.6e psnr=%.3f ssim=%.5f\n", last.step, last.probe_loss,
                last.probe_psnr, last.probe_ssim);
    if (!out_path.empty()) save_scene(out_path, trainer.scene());
    return 0;
}

int cmd_render(const std::string& scene_path, const std::string& dataset_path, int view,
               const std::string& out_path, bool reference, bool metrics) {
    const Scene scene = load_scene(scene_path);
    const Dataset dataset = load_dataset(dataset_path);
    if (view < 0 || view >= static_cast<int>(dataset.cameras.size())) {
        throw InvalidInput("render: view index out of range");
    }
    const Image img = reference
                          ? render_reference(scene, dataset.cameras[view]).image
                          : render(scene, dataset.cameras[view]).image;
    write_image(out_path, img);
    if (metrics) {
        std::printf("view=%d psnr=%.3f ssim=%.5f\n", view, psnr(img, dataset.targets[view]),
                    ssim_metric(img, dataset.targets[view]));
    } else {
        std::printf("wrote %s\n", out_path.c_str());
    }
    return 0;
}

int cmd_synth(const SynthParams& params, const std::string& out_dir,
              const std::string& image_ext) {
    const SynthResult synth = synth_scene(params);
    write_synth(out_dir, synth, image_ext);
    std::printf("wrote %s: %d kernels, %d train + %d probe views at %dx%d\n", out_dir.c_str(),
                params.kernels, params.views, params.probe_views, params.width, params.height);
    return 0;
}

int cmd_check_grad(const std::string& scene_path, const std::string& dataset_path, int view,
                   int random_scenes, CheckOptions options) {
    bool all_pass = true;
    double seconds = 0.0;
    auto run_one = [&](const Scene& scene, const Camera& camera, const Image& target,
                       const std::string& tag) {
        const CheckReport report = check_derivatives(scene, camera, target, options);
        seconds += report.seconds;
        for (const auto& item : report.items) {
            std::printf("[%s] %-28s max_rel_err=%.3e tol=%.1e samples=%d %s\n", tag.c_str(),
                        item.name.c_str(), item.max_rel_err, item.tolerance, item.samples,
                        item.pass ? "pass" : "FAIL");
        }
        all_pass = all_pass && report.all_pass;
    };
    if (random_scenes > 0) {
        for (int s = 0; s < random_scenes; ++s) {
            const CheckFixture f = make_check_fixture(static_cast<std::uint64_t>(s + 1));
            run_one(f.scene, f.camera, f.target, "scene " + std::to_string(s + 1));
        }
    } else {
        const Scene scene = load_scene(scene_path);
        const Dataset dataset = load_dataset(dataset_path);
        if (view < 0 || view >= static_cast<int>(dataset.cameras.size())) {
            throw InvalidInput("check-grad: view index out of range");
        }
        run_one(scene, dataset.cameras[view], dataset.targets[view], "view " + std::to_string(view));
    }
    std::printf("check-grad: %s (%.1fs)\n", all_pass ? "PASS" : "FAIL", seconds);
    return all_pass ? 0 : 1;
}

int cmd_bench(const std::string& fixture, BenchConfig bench) {
    if (!bench.out_dir.empty()) std::filesystem::create_directories(bench.out_dir);
    bool ok = true;
    if (fixture == "convergence" || fixture == "all") {
        const ConvergenceResult r = run_convergence_benchmark(bench);
        for (const auto& s : r.seeds) {
            std::printf("convergence seed %llu: gd@%d=%.5e newton reaches it at step %d "
                        "(ms/iter gd=%.2f newton=%.2f)\n",
                        static_cast<unsigned long long>(s.seed), bench.gd_iterations,
                        s.gd_final_loss, s.newton_steps_to_reach, s.gd_ms_per_iter,
                        s.newton_ms_per_iter);
        }
        std::printf("convergence: within budget=%s mean cost ratio=%.2f\n",
                    r.converged_within_budget ? "yes" : "NO", r.mean_cost_ratio);
        ok = ok && r.converged_within_budget;
    }
    if (fixture == "overshoot" || fixture == "all") {
        const OvershootResult r = run_overshoot_benchmark(bench);
        std::printf("overshoot mean positive spike: K=0 %.4e, K=3 %.4e, K=8 %.4e\n",
                    r.mean_spike[0], r.mean_spike[1], r.mean_spike[2]);
        ok = ok && r.mean_spike[1] < r.mean_spike[0] && r.mean_spike[2] <= r.mean_spike[1];
    }
    if (fixture == "order" || fixture == "all") {
        const OrderResult r = run_order_benchmark(bench);
        for (const auto& s : r.seeds) {
            std::printf("order seed %llu: position-first=%.5e color-first=%.5e "
                        "rot/scale-swap=%.5e\n",
                        static_cast<unsigned long long>(s.seed), s.position_first, s.color_first,
                        s.rot_scale_swapped);
            ok = ok && s.position_first <= s.color_first;
        }
    }
    std::printf("bench: %s\n", ok ? "PASS" : "FAIL");
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gaussian-splat training engine with per-attribute local Newton solves"};
    app.require_subcommand(1);

    // train ------------------------------------------------------------
    auto* train = app.add_subcommand("train", "Optimize a scene against a dataset");
    std::string scene_path, dataset_path, log_path, out_path, order_str = "pos,rot,scale,opacity,color";
    std::string optimizer_str = "newton";
    TrainConfig config;
    config.seed = env_u64("NGS_SEED", 0);
    config.threads = env_int("NGS_THREADS", default_threads());
    train->add_option("--scene", scene_path, "Scene JSON")->required();
    train->add_option("--dataset", dataset_path, "Dataset manifest JSON")->required();
    train->add_option("--optimizer", optimizer_str, "newton|gd|adam");
    train->add_option("--order", order_str, "Attribute pass order");
    train->add_option("--epochs", config.epochs, "Training epochs");
    train->add_option("--knn", config.knn, "Secondary target count K");
    train->add_option("--secondary-downsample", config.secondary_downsample,
                      "Secondary view downsample factor");
    train->add_option("--lambda", config.loss.lambda, "SSIM loss weight");
    train->add_option("--seed", config.seed, "RNG seed");
    train->add_option("--threads", config.threads, "Worker threads");
    train->add_option("--probe-cadence", config.probe_cadence, "Probe metrics every N steps");
    train->add_option("--log", log_path, "CSV loss curve output");
    train->add_option("--out", out_path, "Final scene JSON output");
    train->add_option("--checkpoint-dir", config.checkpoint_dir, "Per-epoch scene checkpoints");
    train->add_option("--dump-hessian", config.dump_hessian_path,
                      "CSV dump of the first step's local systems");

    // render -----------------------------------------------------------
    auto* render_cmd = app.add_subcommand("render", "Render one dataset view");
    std::string render_out = "render.ppm";
    int render_view = 0;
    bool render_reference_flag = false, render_metrics = false;
    render_cmd->add_option("--scene", scene_path, "Scene JSON")->required();
    render_cmd->add_option("--dataset", dataset_path, "Dataset manifest JSON")->required();
    render_cmd->add_option("--view", render_view, "View index");
    render_cmd->add_option("--out", render_out, "Output image (.ppm or .png)");
    render_cmd->add_flag("--reference", render_reference_flag, "Use the exact reference renderer");
    render_cmd->add_flag("--metrics", render_metrics, "Print PSNR/SSIM against the target");

    // synth ------------------------------------------------------------
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic scene + dataset");
    SynthParams synth_params;
    synth_params.seed = env_u64("NGS_SEED", 0);
    std::string synth_dir = "synth_out", layout_str = "sphere", image_ext = "ppm";
    int synth_res = 64;
    synth_cmd->add_option("--seed", synth_params.seed, "RNG seed");
    synth_cmd->add_option("--kernels", synth_params.kernels, "Kernel count");
    synth_cmd->add_option("--views", synth_params.views, "Training view count");
    synth_cmd->add_option("--probe-views", synth_params.probe_views, "Held-out probe views");
    synth_cmd->add_option("--res", synth_res, "Image resolution (square)");
    synth_cmd->add_option("--layout", layout_str, "Camera layout: sphere|ring");
    synth_cmd->add_option("--perturbation", synth_params.perturbation,
                          "Training-init jitter scale (0 disables)");
    synth_cmd->add_option("--image-ext", image_ext, "Image format for targets: ppm|png");
    synth_cmd->add_option("--out-dir", synth_dir, "Output directory");

    // check-grad ---------------------------------------------------------
    auto* check_cmd = app.add_subcommand("check-grad", "Finite-difference derivative audit");
    CheckOptions check_options;
    int check_view = 0, check_random = 0;
    check_cmd->add_option("--scene", scene_path, "Scene JSON");
    check_cmd->add_option("--dataset", dataset_path, "Dataset manifest JSON");
    check_cmd->add_option("--view", check_view, "View index");
    check_cmd->add_option("--random", check_random, "Run on N seeded random fixtures instead");
    check_cmd->add_option("--tol", check_options.tolerance, "Gradient tolerance");
    check_cmd->add_option("--ssim-tol", check_options.ssim_hess_tolerance,
                          "SSIM Hessian tolerance");
    check_cmd->add_option("--kernels", check_options.sampled_kernels, "Sampled kernels per scene");

    // bench ------------------------------------------------------------
    auto* bench_cmd = app.add_subcommand("bench", "Comparative fixtures (newton vs gd, ablations)");
    BenchConfig bench;
    bench.threads = env_int("NGS_THREADS", default_threads());
    std::string bench_fixture = "all";
    bench_cmd->add_option("--fixture", bench_fixture, "convergence|overshoot|order|all");
    bench_cmd->add_option("--seeds", bench.seeds, "Seeds per fixture");
    bench_cmd->add_option("--seed-base", bench.seed_base, "First seed");
    bench_cmd->add_option("--threads", bench.threads, "Worker threads");
    bench_cmd->add_option("--out-dir", bench.out_dir, "CSV output directory");

    try {
        app.parse(argc, argv);
        if (train->parsed()) {
            config.optimizer = parse_optimizer(optimizer_str);
            config.order = parse_order(order_str);
            return cmd_train(scene_path, dataset_path, config, log_path, out_path);
        }
        if (render_cmd->parsed()) {
            return cmd_render(scene_path, dataset_path, render_view, render_out,
                              render_reference_flag, render_metrics);
        }
        if (synth_cmd->parsed()) {
            synth_params.width = synth_params.height = synth_res;
            if (layout_str == "ring") {
                synth_params.layout = CameraLayout::ring;
            } else if (layout_str != "sphere") {
                throw InvalidInput("--layout must be sphere or ring");
            }
            return cmd_synth(synth_params, synth_dir, image_ext);
        }
        if (check_cmd->parsed()) {
            if (check_random == 0 && (scene_path.empty() || dataset_path.empty())) {
                throw InvalidInput("check-grad needs --scene/--dataset or --random N");
            }
            return cmd_check_grad(scene_path, dataset_path, check_view, check_random,
                                  check_options);
        }
        if (bench_cmd->parsed()) {
            return cmd_bench(bench_fixture, bench);
        }
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        nlohmann::json err;
        err["error"] = e.what();
        err["command"] = argc > 1 ? argv[1] : "";
        std::cerr << err.dump() << '\n';
        return 1;
    }
    return 0;
}
