#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ngs/camera.hpp"
#include "ngs/core.hpp"
#include "ngs/image.hpp"
#include "ngs/image_io.hpp"
#include "ngs/scene.hpp"

namespace ngs {

// Scene file layout:
//   {background:[r,g,b], sh_degree:n,
//    kernels:[{p:[3], s:[3], q:[4], sigma:f, sh:[48]}]}
// Doubles are emitted with shortest-round-trip formatting, so save/load is
// lossless.

inline nlohmann::json scene_to_json(const Scene& scene) {
    nlohmann::json j;
    j["background"] = {scene.background[0], scene.background[1], scene.background[2]};
    j["sh_degree"] = scene.sh_degree;
    nlohmann::json kernels = nlohmann::json::array();
    for (const auto& k : scene.kernels) {
        nlohmann::json jk;
        jk["p"] = {k.position[0], k.position[1], k.position[2]};
        jk["s"] = {k.scale[0], k.scale[1], k.scale[2]};
        jk["q"] = {k.quaternion[0], k.quaternion[1], k.quaternion[2], k.quaternion[3]};
        jk["sigma"] = k.sigma;
        std::vector<double> sh;
        sh.reserve(48);
        for (int ch = 0; ch < 3; ++ch) {
            for (int i = 0; i < 16; ++i) sh.push_back(k.sh[ch][i]);
        }
        jk["sh"] = sh;
        kernels.push_back(std::move(jk));
    }
    j["kernels"] = std::move(kernels);
    return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
    Scene scene;
    try {
        const auto& bg = j.at("background");
        scene.background = Vec3(bg.at(0), bg.at(1), bg.at(2));
        scene.sh_degree = j.at("sh_degree");
        for (const auto& jk : j.at("kernels")) {
            GaussianKernel k;
            k.position = Vec3(jk.at("p").at(0), jk.at("p").at(1), jk.at("p").at(2));
            k.scale = Vec3(jk.at("s").at(0), jk.at("s").at(1), jk.at("s").at(2));
            k.quaternion =
                Vec4(jk.at("q").at(0), jk.at("q").at(1), jk.at("q").at(2), jk.at("q").at(3));
            k.sigma = jk.at("sigma");
            const auto& sh = jk.at("sh");
            if (sh.size() != 48) throw InvalidInput("scene: kernel sh must have 48 entries");
            for (int ch = 0; ch < 3; ++ch) {
                for (int i = 0; i < 16; ++i) k.sh[ch][i] = sh.at(16 * ch + i);
            }
            scene.kernels.push_back(std::move(k));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("scene: malformed json: ") + e.what());
    }
    validate_scene(scene);
    return scene;
}

inline void save_scene(const std::string& path, const Scene& scene) {
    std::ofstream os(path);
    if (!os) throw IoError("save_scene: cannot open " + path);
    os << scene_to_json(scene).dump(1) << '\n';
    if (!os) throw IoError("save_scene: write failed for " + path);
}

inline Scene load_scene(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("load_scene: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_scene: parse error in " + path + ": " + e.what());
    }
    return scene_from_json(j);
}

// Dataset manifest layout:
//   {cameras:[{view:[16], proj:[16], width, height, image:"path"}], probe:[ids]}
// Matrices are row-major; image paths are relative to the manifest.

struct DatasetManifest {
    struct Entry {
        Mat4 view;
        Mat4 proj;
        int width = 0;
        int height = 0;
        std::string image;
    };
    std::vector<Entry> cameras;
    std::vector<int> probe_ids;
};

/// In-memory dataset: cameras plus loaded ground-truth images and the
/// train/probe split. Synthetic fixtures can also carry exact ground truth
/// rendered at the secondary-target resolution; without it the trainer box
/// filters the full-resolution targets, which at desk-scale resolutions
/// carries a visible resampling bias.
struct Dataset {
    std::vector<Camera> cameras;
    std::vector<Image> targets;
    std::vector<int> train_ids;
    std::vector<int> probe_ids;
    std::vector<Image> secondary_targets;  // optional, one per camera
    int secondary_downsample = 0;          // factor the above were rendered at
};

inline nlohmann::json manifest_to_json(const DatasetManifest& manifest) {
    nlohmann::json j;
    nlohmann::json cams = nlohmann::json::array();
    for (const auto& c : manifest.cameras) {
        nlohmann::json jc;
        std::vector<double> view(16), proj(16);
        for (int r = 0; r < 4; ++r) {
            for (int col = 0; col < 4; ++col) {
                view[4 * r + col] = c.view(r, col);
                proj[4 * r + col] = c.proj(r, col);
            }
        }
        jc["view"] = view;
        jc["proj"] = proj;
        jc["width"] = c.width;
        jc["height"] = c.height;
        jc["image"] = c.image;
        cams.push_back(std::move(jc));
    }
    j["cameras"] = std::move(cams);
    j["probe"] = manifest.probe_ids;
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest manifest;
    try {
        for (const auto& jc : j.at("cameras")) {
            DatasetManifest::Entry e;
            const auto& view = jc.at("view");
            const auto& proj = jc.at("proj");
            if (view.size() != 16 || proj.size() != 16) {
                throw InvalidInput("dataset: view/proj must have 16 entries");
            }
            for (int r = 0; r < 4; ++r) {
                for (int col = 0; col < 4; ++col) {
                    e.view(r, col) = view.at(4 * r + col);
                    e.proj(r, col) = proj.at(4 * r + col);
                }
            }
            e.width = jc.at("width");
            e.height = jc.at("height");
            e.image = jc.at("image");
            manifest.cameras.push_back(std::move(e));
        }
        if (j.contains("probe")) {
            for (const auto& id : j.at("probe")) manifest.probe_ids.push_back(id);
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("dataset: malformed json: ") + e.what());
    }
    return manifest;
}

inline void save_manifest(const std::string& path, const DatasetManifest& manifest) {
    std::ofstream os(path);
    if (!os) throw IoError("save_manifest: cannot open " + path);
    os << manifest_to_json(manifest).dump(1) << '\n';
    if (!os) throw IoError("save_manifest: write failed for " + path);
}

/// Loads the manifest and every referenced image, validating dimensions and
/// the probe split.
inline Dataset load_dataset(const std::string& manifest_path) {
    std::ifstream is(manifest_path);
    if (!is) throw IoError("load_dataset: cannot open " + manifest_path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_dataset: parse error in " + manifest_path + ": " + e.what());
    }
    const DatasetManifest manifest = manifest_from_json(j);
    const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();

    Dataset dataset;
    for (int i = 0; i < static_cast<int>(manifest.cameras.size()); ++i) {
        const auto& e = manifest.cameras[i];
        const std::string image_path = (base / e.image).string();
        if (!std::filesystem::exists(image_path)) {
            throw IoError("load_dataset: missing image " + image_path);
        }
        Image img = read_image(image_path);
        if (img.width != e.width || img.height != e.height) {
            throw InvalidInput("load_dataset: image dimensions disagree with manifest for " +
                               e.image);
        }
        dataset.cameras.emplace_back(e.view, e.proj, e.width, e.height);
        dataset.targets.push_back(std::move(img));
    }
    dataset.probe_ids = manifest.probe_ids;
    for (int id : dataset.probe_ids) {
        if (id < 0 || id >= static_cast<int>(dataset.cameras.size())) {
            throw InvalidInput("load_dataset: probe id out of range");
        }
    }
    for (int i = 0; i < static_cast<int>(dataset.cameras.size()); ++i) {
        if (std::find(dataset.probe_ids.begin(), dataset.probe_ids.end(), i) ==
            dataset.probe_ids.end()) {
            dataset.train_ids.push_back(i);
        }
    }
    return dataset;
}

}  // namespace ngs
