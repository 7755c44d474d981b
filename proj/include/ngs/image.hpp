#pragma once

#include <vector>

#include "ngs/core.hpp"

namespace ngs {

/// Row-major RGB image with 64-bit channels. Pixel (x, y) is column x, row y;
/// the geometric center of pixel (x, y) is (x + 0.5, y + 0.5).
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> data;  // size 3 * width * height

    Image() = default;
    Image(int w, int h, double fill = 0.0) : width(w), height(h), data(3u * w * h, fill) {}

    double& at(int x, int y, int ch) { return data[3 * (static_cast<std::size_t>(y) * width + x) + ch]; }
    double at(int x, int y, int ch) const {
        return data[3 * (static_cast<std::size_t>(y) * width + x) + ch];
    }
    Vec3 pixel(int x, int y) const {
        const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
        return Vec3(data[i], data[i + 1], data[i + 2]);
    }
    void set_pixel(int x, int y, const Vec3& c) {
        const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
        data[i] = c[0];
        data[i + 1] = c[1];
        data[i + 2] = c[2];
    }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    bool same_shape(const Image& o) const { return width == o.width && height == o.height; }
};

/// Box-filter downsample by an integer factor; trailing rows/columns that do
/// not fill a full box are averaged over the partial box.
inline Image downsample_box(const Image& src, int factor) {
    if (factor <= 1) return src;
    const int w = std::max(1, src.width / factor);
    const int h = std::max(1, src.height / factor);
    Image out(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            Vec3 acc = Vec3::Zero();
            int count = 0;
            for (int dy = 0; dy < factor; ++dy) {
                for (int dx = 0; dx < factor; ++dx) {
                    const int sx = x * factor + dx;
                    const int sy = y * factor + dy;
                    if (sx < src.width && sy < src.height) {
                        acc += src.pixel(sx, sy);
                        ++count;
                    }
                }
            }
            out.set_pixel(x, y, acc / count);
        }
    }
    return out;
}

}  // namespace ngs
