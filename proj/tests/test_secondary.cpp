#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ngs/newton.hpp"
#include "ngs/secondary.hpp"
#include "test_util.hpp"

using namespace ngs;
using testutil::make_test_camera;

TEST_CASE("fit_bounding_sphere basics") {
    Scene single;
    single.kernels.push_back(GaussianKernel{});
    const CameraSphere s0 = fit_bounding_sphere(single);
    CHECK(s0.center.norm() == 0.0);
    CHECK(s0.radius > 0.0);

    Scene pair;
    GaussianKernel a, b;
    a.position = Vec3(1, 0, 0);
    b.position = Vec3(-1, 0, 0);
    pair.kernels = {a, b};
    const CameraSphere s1 = fit_bounding_sphere(pair);
    CHECK(s1.center.norm() < 1e-15);
    CHECK(s1.radius == doctest::Approx(1.05).epsilon(1e-12));

    Rng rng(1);
    const Scene random = testutil::random_scene(rng, 20);
    const CameraSphere s2 = fit_bounding_sphere(random);
    for (const auto& k : random.kernels) {
        CHECK((k.position - s2.center).norm() <= s2.radius + 1e-12);
    }
    CHECK_THROWS_AS(fit_bounding_sphere(Scene{}), InvalidInput);
}

TEST_CASE("spherical_distance landmark angles") {
    CameraSphere sphere;
    sphere.center = Vec3::Zero();
    sphere.radius = 2.0;
    const Camera a = make_test_camera(Vec3(0, 0, -4));
    const Camera b = make_test_camera(Vec3(0, 0, -7));   // same direction
    const Camera c = make_test_camera(Vec3(0, 0, 5));    // antipodal
    const Camera d = make_test_camera(Vec3(-6, 0, 0));   // orthogonal
    CHECK(spherical_distance(sphere, a, b) == doctest::Approx(0.0));
    CHECK(spherical_distance(sphere, a, c) == doctest::Approx(2.0 * M_PI).epsilon(1e-12));
    CHECK(spherical_distance(sphere, a, d) == doctest::Approx(M_PI).epsilon(1e-12));

    Camera at_center = a;
    at_center.center = sphere.center;
    CHECK_THROWS_AS(spherical_distance(sphere, at_center, b), DegenerateGeometry);
}

TEST_CASE("knn_views on four equally spaced ring cameras") {
    CameraSphere sphere;
    sphere.center = Vec3::Zero();
    sphere.radius = 1.0;
    // Axis-aligned ring so the two adjacent neighbors are at exactly equal
    // spherical distance and the id tie-break is exercised.
    std::vector<Camera> cams;
    cams.push_back(make_test_camera(Vec3(3, 0, 0)));
    cams.push_back(make_test_camera(Vec3(0, 0, 3)));
    cams.push_back(make_test_camera(Vec3(-3, 0, 0)));
    cams.push_back(make_test_camera(Vec3(0, 0, -3)));
    const SecondaryTargetSet k1 = knn_views(cams, sphere, 1);
    for (int t = 0; t < 4; ++t) {
        REQUIRE(k1.neighbors[t].size() == 1);
        const int n = k1.neighbors[t][0];
        // Adjacent on the ring; the equidistant tie resolves to the lower id.
        const int left = (t + 3) % 4, right = (t + 1) % 4;
        CHECK((n == left || n == right));
        CHECK(n == std::min(left, right));
    }

    const SecondaryTargetSet kall = knn_views(cams, sphere, 9);
    for (int t = 0; t < 4; ++t) {
        CHECK(kall.neighbors[t].size() == 3);
        for (int n : kall.neighbors[t]) CHECK(n != t);
    }

    const SecondaryTargetSet k0 = knn_views(cams, sphere, 0);
    for (int t = 0; t < 4; ++t) CHECK(k0.neighbors[t].empty());
}

TEST_CASE("downsampled cameras clamp to a 16 pixel floor") {
    const Camera cam = make_test_camera(Vec3(0, 0, -4), 64, 64);
    const Camera down = make_downsampled_camera(cam, 4);
    CHECK(down.width == 16);
    CHECK(down.height == 16);
    const Camera cam48 = make_test_camera(Vec3(0, 0, -4), 48, 48);
    CHECK(clamp_downsample_factor(cam48, 4) == 3);  // 48/4 = 12 < 16, falls back to 3
    const Camera down48 = make_downsampled_camera(cam48, 4);
    CHECK(down48.width == 16);
}

TEST_CASE("downsampled view keeps the pixel mapping consistent") {
    // The projection matrices are resolution free; halving width/height
    // must exactly halve pixel coordinates.
    const Camera cam = make_test_camera(Vec3(0.4, -0.2, -3.6), 64, 64);
    const Camera down = make_downsampled_camera(cam, 2);
    const Vec3 p(0.2, 0.1, -0.3);
    const auto full = project_center(cam, p);
    const auto half = project_center(down, p);
    REQUIRE(full.has_value());
    REQUIRE(half.has_value());
    CHECK((full->pixel / 2.0 - half->pixel).norm() < 1e-12);
}

TEST_CASE("kernel invisible in a neighbor leaves the system unchanged") {
    Rng rng(5);
    Scene scene = testutil::random_scene(rng, 6);
    const Camera primary_cam = make_test_camera(Vec3(0, 0, -3.4), 32, 32);
    const Camera away_cam = make_test_camera(Vec3(0, 0, 3.4), 32, 32);  // opposite side
    scene.kernels[0].position = Vec3(0, 0, 4.5);  // behind the opposite camera

    const Image primary_target = render_reference(scene, primary_cam).image;
    const Image away_target = render_reference(scene, away_cam).image;
    const ViewContext primary = build_view_context(scene, primary_cam, primary_target,
                                                   RasterOptions::reference(), LossConfig{});
    const ViewContext away = build_view_context(scene, away_cam, away_target,
                                                RasterOptions::reference(), LossConfig{});
    REQUIRE(away.inverted.entry_of_kernel[0] < 0);  // culled behind that camera

    std::vector<const ViewContext*> sec{&away};
    const OpacitySolve with = solve_opacity(scene, 0, primary, sec);
    const OpacitySolve without = solve_opacity(scene, 0, primary, {});
    CHECK(with.sys.grad[0] == without.sys.grad[0]);
    CHECK(with.sys.hess(0, 0) == without.sys.hess(0, 0));
}

TEST_CASE("downsample_box averages full boxes exactly") {
    Image img(8, 4);
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 8; ++x) {
            img.set_pixel(x, y, Vec3(x, y, x + y));
        }
    }
    const Image down = downsample_box(img, 2);
    CHECK(down.width == 4);
    CHECK(down.height == 2);
    CHECK(down.at(0, 0, 0) == doctest::Approx(0.5));   // mean of x in {0,1}
    CHECK(down.at(3, 1, 1) == doctest::Approx(2.5));   // mean of y in {2,3}
}
