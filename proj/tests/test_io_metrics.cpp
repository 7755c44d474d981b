#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ngs/check.hpp"
#include "ngs/image_io.hpp"
#include "ngs/metrics.hpp"
#include "ngs/scene_io.hpp"
#include "ngs/synth.hpp"
#include "test_util.hpp"

using namespace ngs;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

Image random_image(Rng& rng, int w, int h) {
    Image img(w, h);
    for (auto& v : img.data) v = rng.uniform(0.0, 1.0);
    return img;
}

// 5x4 RGB PNG produced by an external compressor (dynamic Huffman deflate,
// filters 0/1/2/4), with its expected pixel bytes.
const char kPngVectorHex[] =
    "89504e470d0a1a0a0000000d4948445200000005000000040802000000c95162170000003b4944415478da"
    "6360f8cfa0f19035e0b048c552dd05ed018cbc6c461a8f58351ef16b3c92d478a4ccc4cb6e848c58c0142b"
    "2f3b3f2fbb242fbb32002b470cfecedf5de10000000049454e44ae426082";

const int kPngVectorPixels[4][15] = {
    {0, 255, 0, 40, 225, 5, 80, 195, 20, 120, 165, 45, 160, 135, 80},
    {13, 6, 50, 53, 232, 55, 93, 202, 70, 133, 172, 95, 173, 142, 130},
    {26, 13, 100, 66, 239, 105, 106, 209, 120, 146, 179, 145, 186, 149, 180},
    {39, 20, 150, 79, 246, 155, 119, 216, 170, 159, 186, 195, 199, 156, 230}};

}  // namespace

TEST_CASE("psnr definition") {
    Image a(10, 10, 0.5);
    CHECK(std::isinf(psnr(a, a)));
    Image b(10, 10, 0.6);  // uniform diff 0.1 -> MSE 0.01 -> 20 dB
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-12));
    Image c(10, 10, 1.5);  // uniform diff 1.0 -> 0 dB
    CHECK(psnr(a, c) == doctest::Approx(0.0));
    CHECK_THROWS_AS(psnr(a, Image(10, 9)), InvalidInput);
}

TEST_CASE("ssim metric endpoints and shared code path") {
    Rng rng(3);
    const Image img = random_image(rng, 24, 24);
    CHECK(ssim_metric(img, img) == doctest::Approx(1.0).epsilon(1e-12));

    const Image noise_a = random_image(rng, 32, 32);
    const Image noise_b = random_image(rng, 32, 32);
    CHECK(std::abs(ssim_metric(noise_a, noise_b)) < 0.2);

    const LossConfig config;
    const SsimWindowStats stats = ssim_window_stats(noise_a, noise_b, config);
    const SsimResult r = ssim_value_and_derivs(stats, noise_a, noise_b, config, false);
    CHECK(ssim_metric(noise_a, noise_b) == r.ssim_mean);
}

TEST_CASE("ppm round trip at 16-bit precision") {
    TempDir dir("ngs_ppm_test");
    Rng rng(5);
    const Image img = random_image(rng, 17, 9);
    const std::string path = (dir.path / "img.ppm").string();
    write_ppm(path, img);
    const Image back = read_ppm(path);
    REQUIRE(back.same_shape(img));
    double worst = 0.0;
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        worst = std::max(worst, std::abs(img.data[i] - back.data[i]));
    }
    CHECK(worst <= 0.5 / 65535 + 1e-12);
}

TEST_CASE("ppm reader handles comments and rejects garbage") {
    TempDir dir("ngs_ppm_test2");
    const std::string path = (dir.path / "img.ppm").string();
    std::ofstream(path) << "P3\n# comment line\n2 1\n255\n255 0 0  0 255 0\n";
    const Image img = read_ppm(path);
    CHECK(img.width == 2);
    CHECK(img.at(0, 0, 0) == doctest::Approx(1.0));
    CHECK(img.at(1, 0, 1) == doctest::Approx(1.0));
    std::ofstream(path) << "P6\n2 1\n255\n";
    CHECK_THROWS_AS(read_ppm(path), IoError);
}

TEST_CASE("png round trip through the stored-deflate writer") {
    TempDir dir("ngs_png_test");
    Rng rng(7);
    const Image img = random_image(rng, 33, 21);
    const std::string path = (dir.path / "img.png").string();
    write_png(path, img);
    const Image back = read_png(path);
    REQUIRE(back.same_shape(img));
    double worst = 0.0;
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        worst = std::max(worst, std::abs(img.data[i] - back.data[i]));
    }
    CHECK(worst <= 0.5 / 255 + 1e-12);
}

TEST_CASE("png reader decodes an externally compressed file") {
    TempDir dir("ngs_png_vector");
    std::vector<std::uint8_t> bytes;
    const std::string hex = kPngVectorHex;
    for (std::size_t i = 0; i + 1 < hex.size(); i += 2) {
        bytes.push_back(static_cast<std::uint8_t>(std::stoi(hex.substr(i, 2), nullptr, 16)));
    }
    const std::string path = (dir.path / "vector.png").string();
    std::ofstream(path, std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    const Image img = read_png(path);
    REQUIRE(img.width == 5);
    REQUIRE(img.height == 4);
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 5; ++x) {
            for (int ch = 0; ch < 3; ++ch) {
                CHECK(img.at(x, y, ch) ==
                      doctest::Approx(kPngVectorPixels[y][3 * x + ch] / 255.0).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("scene json round trip is lossless") {
    TempDir dir("ngs_scene_test");
    Rng rng(9);
    const Scene scene = testutil::random_scene(rng, 7);
    const std::string path = (dir.path / "scene.json").string();
    save_scene(path, scene);
    const Scene back = load_scene(path);
    REQUIRE(back.kernels.size() == scene.kernels.size());
    CHECK(back.sh_degree == scene.sh_degree);
    CHECK((back.background - scene.background).norm() == 0.0);
    for (std::size_t i = 0; i < scene.kernels.size(); ++i) {
        CHECK((back.kernels[i].position - scene.kernels[i].position).norm() == 0.0);
        CHECK((back.kernels[i].scale - scene.kernels[i].scale).norm() == 0.0);
        CHECK((back.kernels[i].quaternion - scene.kernels[i].quaternion).norm() == 0.0);
        CHECK(back.kernels[i].sigma == scene.kernels[i].sigma);
        for (int ch = 0; ch < 3; ++ch) {
            CHECK((back.kernels[i].sh[ch] - scene.kernels[i].sh[ch]).norm() == 0.0);
        }
    }
}

TEST_CASE("scene loader rejects malformed content") {
    TempDir dir("ngs_scene_bad");
    const std::string path = (dir.path / "scene.json").string();
    std::ofstream(path) << "{\"background\":[0,0,0],\"sh_degree\":9,\"kernels\":[]}";
    CHECK_THROWS_AS(load_scene(path), InvalidInput);
    std::ofstream(path) << "not json";
    CHECK_THROWS_AS(load_scene(path), IoError);
}

TEST_CASE("synth fixtures are reproducible and file round trips stay close") {
    TempDir dir("ngs_synth_test");
    SynthParams params;
    params.seed = 11;
    params.kernels = 12;
    params.views = 4;
    params.probe_views = 2;
    params.width = 32;
    params.height = 32;

    const SynthResult a = synth_scene(params);
    const SynthResult b = synth_scene(params);
    CHECK(scene_to_json(a.truth).dump() == scene_to_json(b.truth).dump());
    CHECK(scene_to_json(a.init).dump() == scene_to_json(b.init).dump());
    for (std::size_t i = 0; i < a.dataset.targets.size(); ++i) {
        CHECK(a.dataset.targets[i].data == b.dataset.targets[i].data);
    }

    write_synth(dir.path.string(), a);
    const Dataset loaded = load_dataset((dir.path / "dataset.json").string());
    REQUIRE(loaded.cameras.size() == a.dataset.cameras.size());
    CHECK(loaded.probe_ids == a.dataset.probe_ids);
    CHECK(loaded.train_ids == a.dataset.train_ids);
    double worst = 0.0;
    for (std::size_t i = 0; i < loaded.targets.size(); ++i) {
        for (std::size_t j = 0; j < loaded.targets[i].data.size(); ++j) {
            worst = std::max(worst,
                             std::abs(loaded.targets[i].data[j] - a.dataset.targets[i].data[j]));
        }
    }
    CHECK(worst <= 0.5 / 65535 + 1e-12);  // 16-bit PPM quantization
}

TEST_CASE("zero perturbation leaves the init scene equal to the truth") {
    SynthParams params;
    params.seed = 13;
    params.kernels = 5;
    params.views = 2;
    params.probe_views = 1;
    params.width = 32;
    params.height = 32;
    params.perturbation = 0.0;
    const SynthResult synth = synth_scene(params);
    CHECK(scene_to_json(synth.truth).dump() == scene_to_json(synth.init).dump());
}

TEST_CASE("dataset loader flags missing images and bad probe ids") {
    TempDir dir("ngs_manifest_bad");
    SynthParams params;
    params.seed = 17;
    params.kernels = 4;
    params.views = 2;
    params.probe_views = 1;
    params.width = 32;
    params.height = 32;
    const SynthResult synth = synth_scene(params);
    write_synth(dir.path.string(), synth);

    fs::remove(dir.path / "view_1.ppm");
    CHECK_THROWS_AS(load_dataset((dir.path / "dataset.json").string()), IoError);
}

// ---------------------------------------------------------------------------
// Derivative-check harness
// ---------------------------------------------------------------------------

TEST_CASE("check_derivatives passes on an audited fixture") {
    const CheckFixture f = make_check_fixture(1);
    CheckOptions options;
    options.sampled_kernels = 3;
    options.sampled_pixels = 4;
    const CheckReport report = check_derivatives(f.scene, f.camera, f.target, options);
    for (const auto& item : report.items) {
        INFO(item.name, " err=", item.max_rel_err);
        CHECK(item.pass);
    }
    CHECK(report.all_pass);
}

TEST_CASE("check_derivatives flags an injected sign error in one quantity") {
    const CheckFixture f = make_check_fixture(2);
    CheckOptions options;
    options.sampled_kernels = 2;
    options.sampled_pixels = 2;
    options.corrupt_quantity = "projection_jacobian";
    const CheckReport report = check_derivatives(f.scene, f.camera, f.target, options);
    CHECK_FALSE(report.all_pass);
    const CheckItem* bad = report.find("projection_jacobian");
    REQUIRE(bad != nullptr);
    CHECK_FALSE(bad->pass);
    const CheckItem* good = report.find("projection_hessian");
    REQUIRE(good != nullptr);
    CHECK(good->pass);
}

TEST_CASE("check_derivatives is vacuous on an empty scene") {
    Scene scene;
    scene.background = Vec3(0.2, 0.2, 0.2);
    const Camera cam = testutil::make_test_camera(Vec3(0, 0, -4), 48, 48);
    const Image target(48, 48, 0.2);
    const CheckReport report = check_derivatives(scene, cam, target);
    CHECK(report.all_pass);
}
