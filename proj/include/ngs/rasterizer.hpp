#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <ranges>
#include <span>
#include <vector>

#include "ngs/camera.hpp"
#include "ngs/core.hpp"
#include "ngs/image.hpp"
#include "ngs/scene.hpp"
#include "ngs/sh.hpp"

namespace ngs {

inline constexpr int kTileSize = 16;
// Splats with alpha below the cutoff are skipped. Sub-cutoff losses
// accumulate across splats, so the cutoff sits well under the rasterizer's
// 2e-3 deviation budget rather than at the classic 1/255.
inline constexpr double kAlphaCutoff = 1e-4;
inline constexpr double kTransmittanceMin = 1e-4;

struct RasterOptions {
    double lambda_lp = kDefaultLowPass;
    double alpha_cutoff = kAlphaCutoff;  // 0 disables
    double t_min = kTransmittanceMin;    // 0 disables early termination
    bool tiled = true;
    int threads = 1;

    /// All approximations off: every splat reaches every pixel.
    static RasterOptions reference() {
        RasterOptions o;
        o.alpha_cutoff = 0.0;
        o.t_min = 0.0;
        o.tiled = false;
        return o;
    }
};

/// Test/diagnostic hook: replace one kernel's full projected covariance
/// (low-pass included) before compositing.
struct Cov2dOverride {
    int kernel = -1;
    Mat2 sigma = Mat2::Identity();
};

struct SplatEntry {
    int kernel = -1;
    ProjectedKernel proj;
    Vec3 view_color = Vec3::Zero();
    std::array<bool, 3> color_clamped{false, false, false};
    double opacity = 0.0;
    Vec2 bbox_min = Vec2::Zero();  // axis-aligned 3-sigma box, pixel units
    Vec2 bbox_max = Vec2::Zero();
};

struct SplatList {
    int width = 0;
    int height = 0;
    int tiles_x = 0;
    int tiles_y = 0;
    std::vector<SplatEntry> entries;    // ascending depth, ties by kernel id
    std::vector<int> tile_offsets;      // CSR over tiles, size tiles_x*tiles_y + 1
    std::vector<int> tile_indices;      // entry indices, depth order within a tile
};

/// A splat surviving the cutoffs at one pixel. `transmittance` is the prefix
/// product before this splat's own attenuation.
struct PixelSplat {
    int entry = -1;
    double weight = 0.0;  // G
    double alpha = 0.0;   // G * sigma
    double transmittance = 1.0;
};

struct CaptureBuffer {
    int width = 0;
    int height = 0;
    std::vector<PixelSplat> records;  // per-pixel runs, row-major pixel order
    std::vector<int> offsets;         // size width*height + 1

    std::span<const PixelSplat> at(int x, int y) const {
        const std::size_t i = static_cast<std::size_t>(y) * width + x;
        return {records.data() + offsets[i], records.data() + offsets[i + 1]};
    }
};

struct RenderTarget {
    Image image;
    std::optional<CaptureBuffer> capture;
};

// ---------------------------------------------------------------------------
// Gaussian weight and its derivatives
// ---------------------------------------------------------------------------

struct GaussianWeightDerivs {
    double g = 0.0;
    Vec2 d_pi = Vec2::Zero();
    Mat2 d2_pi = Mat2::Zero();
    Mat2 d_sigma = Mat2::Zero();
    std::array<std::array<Mat2, 2>, 2> d2_sigma{};  // [p][l](g,h)
    std::array<Mat2, 2> d2_pi_sigma{};              // [a](p,l)
};

inline double gaussian_value(const Mat2& sigma_inv, const Vec2& d) {
    return std::exp(-0.5 * d.dot(sigma_inv * d));
}

/// G = exp(-1/2 (pi - x)^T Sigma^-1 (pi - x)) with derivatives w.r.t. pi and
/// Sigma. Sigma tensors are symmetrized over each index pair so they contract
/// correctly with symmetric perturbations and compare entrywise against
/// symmetric finite differences.
inline GaussianWeightDerivs gaussian_weight(const Mat2& sigma, const Vec2& pi, const Vec2& x) {
    const double det = sigma.determinant();
    if (!(det > 0.0) || !std::isfinite(det)) {
        throw NumericalError("gaussian_weight: covariance is not positive definite");
    }
    const Mat2 q = sigma.inverse();
    const Vec2 d = pi - x;
    const Vec2 qd = q * d;
    const double g = std::exp(-0.5 * d.dot(qd));

    GaussianWeightDerivs out;
    out.g = g;
    out.d_pi = -g * qd;
    out.d2_pi = g * (qd * qd.transpose() - q);
    out.d_sigma = 0.5 * g * (qd * qd.transpose());

    std::array<std::array<Mat2, 2>, 2> raw{};
    for (int p = 0; p < 2; ++p) {
        for (int l = 0; l < 2; ++l) {
            Mat2 s;
            for (int gg = 0; gg < 2; ++gg) {
                for (int h = 0; h < 2; ++h) {
                    s(gg, h) = g * (0.25 * qd[p] * qd[l] * qd[gg] * qd[h] -
                                    0.5 * (q(p, gg) * qd[h] * qd[l] + qd[p] * q(l, gg) * qd[h]));
                }
            }
            raw[p][l] = s;
        }
    }
    // Symmetrize within each Sigma index pair, then across the two pairs.
    std::array<std::array<Mat2, 2>, 2> sym{};
    for (int p = 0; p < 2; ++p) {
        for (int l = 0; l < 2; ++l) {
            const Mat2 m = 0.5 * (raw[p][l] + raw[l][p]);
            sym[p][l] = 0.5 * (m + m.transpose());
        }
    }
    for (int p = 0; p < 2; ++p) {
        for (int l = 0; l < 2; ++l) {
            Mat2 m;
            for (int gg = 0; gg < 2; ++gg) {
                for (int h = 0; h < 2; ++h) {
                    m(gg, h) = 0.5 * (sym[p][l](gg, h) + sym[gg][h](p, l));
                }
            }
            out.d2_sigma[p][l] = m;
        }
    }

    for (int a = 0; a < 2; ++a) {
        Mat2 m;
        for (int p = 0; p < 2; ++p) {
            for (int l = 0; l < 2; ++l) {
                m(p, l) = -0.5 * g * qd[a] * qd[p] * qd[l] +
                          0.5 * g * (q(p, a) * qd[l] + qd[p] * q(l, a));
            }
        }
        out.d2_pi_sigma[a] = 0.5 * (m + m.transpose());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Splat list construction
// ---------------------------------------------------------------------------

inline SplatList build_splat_list(const Scene& scene, const Camera& camera,
                                  const RasterOptions& options = RasterOptions{},
                                  const Cov2dOverride* override_cov = nullptr) {
    SplatList list;
    list.width = camera.width;
    list.height = camera.height;
    list.tiles_x = (camera.width + kTileSize - 1) / kTileSize;
    list.tiles_y = (camera.height + kTileSize - 1) / kTileSize;

    list.entries.reserve(scene.kernels.size());
    for (int k = 0; k < static_cast<int>(scene.kernels.size()); ++k) {
        const auto& kernel = scene.kernels[k];
        auto proj = project_kernel(camera, kernel, options.lambda_lp);
        if (!proj) continue;  // behind camera
        SplatEntry e;
        e.kernel = k;
        e.proj = *proj;
        if (override_cov && override_cov->kernel == k) {
            e.proj.cov2d = override_cov->sigma;
            if (!(e.proj.cov2d.determinant() > 0.0)) {
                throw NumericalError("build_splat_list: covariance override not positive definite");
            }
            e.proj.cov2d_inv = e.proj.cov2d.inverse();
        }
        const ShBasis basis = eval_sh_basis(e.proj.view_dir, scene.sh_degree);
        const ViewColor vc = eval_view_color(basis, kernel.sh);
        e.view_color = vc.value;
        e.color_clamped = vc.clamped;
        e.opacity = kernel.sigma;
        // Conservative bound of the 3-sigma ellipse, widened so the box also
        // covers every sample the alpha cutoff keeps: exp(-r^2/2) < cutoff.
        // With cutoffs disabled every splat must reach every tile.
        if (options.alpha_cutoff > 0.0) {
            const double radius =
                std::max(3.0, std::sqrt(2.0 * std::log(1.0 / options.alpha_cutoff)));
            const double rx = radius * std::sqrt(std::max(e.proj.cov2d(0, 0), 0.0));
            const double ry = radius * std::sqrt(std::max(e.proj.cov2d(1, 1), 0.0));
            e.bbox_min = Vec2(e.proj.pixel.x() - rx, e.proj.pixel.y() - ry);
            e.bbox_max = Vec2(e.proj.pixel.x() + rx, e.proj.pixel.y() + ry);
        } else {
            e.bbox_min = Vec2(0.0, 0.0);
            e.bbox_max = Vec2(camera.width - 1.0, camera.height - 1.0);
        }
        list.entries.push_back(std::move(e));
    }

    std::sort(list.entries.begin(), list.entries.end(),
              [](const SplatEntry& a, const SplatEntry& b) {
                  if (a.proj.depth != b.proj.depth) return a.proj.depth < b.proj.depth;
                  return a.kernel < b.kernel;
              });

    const int tiles = list.tiles_x * list.tiles_y;
    std::vector<std::vector<int>> bins(tiles);
    for (int i = 0; i < static_cast<int>(list.entries.size()); ++i) {
        const auto& e = list.entries[i];
        const int tx0 = std::clamp(static_cast<int>(std::floor(e.bbox_min.x() / kTileSize)), 0,
                                   list.tiles_x - 1);
        const int tx1 = std::clamp(static_cast<int>(std::floor(e.bbox_max.x() / kTileSize)), 0,
                                   list.tiles_x - 1);
        const int ty0 = std::clamp(static_cast<int>(std::floor(e.bbox_min.y() / kTileSize)), 0,
                                   list.tiles_y - 1);
        const int ty1 = std::clamp(static_cast<int>(std::floor(e.bbox_max.y() / kTileSize)), 0,
                                   list.tiles_y - 1);
        if (e.bbox_max.x() < 0 || e.bbox_min.x() >= list.width || e.bbox_max.y() < 0 ||
            e.bbox_min.y() >= list.height) {
            continue;  // entirely off-screen
        }
        for (int ty = ty0; ty <= ty1; ++ty) {
            for (int tx = tx0; tx <= tx1; ++tx) {
                bins[ty * list.tiles_x + tx].push_back(i);
            }
        }
    }
    list.tile_offsets.assign(tiles + 1, 0);
    for (int t = 0; t < tiles; ++t) {
        list.tile_offsets[t + 1] = list.tile_offsets[t] + static_cast<int>(bins[t].size());
    }
    list.tile_indices.resize(list.tile_offsets.back());
    for (int t = 0; t < tiles; ++t) {
        std::copy(bins[t].begin(), bins[t].end(), list.tile_indices.begin() + list.tile_offsets[t]);
    }
    return list;
}

// ---------------------------------------------------------------------------
// Forward compositing
// ---------------------------------------------------------------------------

namespace detail {

template <typename EntryRange>
inline void composite_pixel(const SplatList& list, const EntryRange& order, int x, int y,
                            const Vec3& background, const RasterOptions& options, Vec3& out_color,
                            std::vector<PixelSplat>* capture) {
    const Vec2 px(x + 0.5, y + 0.5);
    double t = 1.0;
    Vec3 c = Vec3::Zero();
    for (const int idx : order) {
        const SplatEntry& e = list.entries[idx];
        const Vec2 d = e.proj.pixel - px;
        const double g = gaussian_value(e.proj.cov2d_inv, d);
        const double alpha = g * e.opacity;
        if (alpha < options.alpha_cutoff) continue;
        if (capture) capture->push_back(PixelSplat{idx, g, alpha, t});
        c += t * alpha * e.view_color;
        t *= (1.0 - alpha);
        if (options.t_min > 0.0 && t < options.t_min) break;
    }
    out_color = c + t * background;
}

}  // namespace detail

inline RenderTarget composite_forward(const SplatList& list, const Vec3& background,
                                      const RasterOptions& options = RasterOptions{},
                                      bool capture = false) {
    RenderTarget target;
    target.image = Image(list.width, list.height);
    const std::size_t pixel_count = static_cast<std::size_t>(list.width) * list.height;

    // Workers fill disjoint row bands (or tiles); captured records go into
    // band-local buffers that are stitched into one CSR layout afterwards,
    // so the hot loop never touches the global allocator per pixel.
    struct BandCapture {
        std::vector<PixelSplat> records;
        std::vector<int> counts;
    };
    std::vector<BandCapture> bands;

    auto run_region = [&](auto&& region_of, std::size_t regions) {
        if (capture) bands.resize(regions);
        parallel_for(regions, options.threads, [&](std::size_t lo, std::size_t hi) {
            std::vector<PixelSplat> local;
            for (std::size_t region = lo; region < hi; ++region) {
                BandCapture* band = capture ? &bands[region] : nullptr;
                region_of(region, band, local);
            }
        });
    };

    if (options.tiled) {
        const int tiles = list.tiles_x * list.tiles_y;
        run_region(
            [&](std::size_t tile, BandCapture* band, std::vector<PixelSplat>& local) {
                const int tx = static_cast<int>(tile) % list.tiles_x;
                const int ty = static_cast<int>(tile) / list.tiles_x;
                const int x0 = tx * kTileSize;
                const int y0 = ty * kTileSize;
                const int x1 = std::min(x0 + kTileSize, list.width);
                const int y1 = std::min(y0 + kTileSize, list.height);
                const auto begin = list.tile_indices.begin() + list.tile_offsets[tile];
                const auto end = list.tile_indices.begin() + list.tile_offsets[tile + 1];
                const auto order = std::ranges::subrange(begin, end);
                if (band) band->counts.assign((x1 - x0) * (y1 - y0), 0);
                int slot = 0;
                for (int y = y0; y < y1; ++y) {
                    for (int x = x0; x < x1; ++x, ++slot) {
                        Vec3 c;
                        local.clear();
                        detail::composite_pixel(list, order, x, y, background, options, c,
                                                band ? &local : nullptr);
                        if (band) {
                            band->counts[slot] = static_cast<int>(local.size());
                            band->records.insert(band->records.end(), local.begin(), local.end());
                        }
                        target.image.set_pixel(x, y, c);
                    }
                }
            },
            tiles);
    } else {
        std::vector<int> all(list.entries.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
        run_region(
            [&](std::size_t row, BandCapture* band, std::vector<PixelSplat>& local) {
                if (band) band->counts.assign(list.width, 0);
                for (int x = 0; x < list.width; ++x) {
                    Vec3 c;
                    local.clear();
                    detail::composite_pixel(list, all, x, static_cast<int>(row), background,
                                            options, c, band ? &local : nullptr);
                    if (band) {
                        band->counts[x] = static_cast<int>(local.size());
                        band->records.insert(band->records.end(), local.begin(), local.end());
                    }
                    target.image.set_pixel(x, static_cast<int>(row), c);
                }
            },
            list.height);
    }

    if (capture) {
        CaptureBuffer cap_buf;
        cap_buf.width = list.width;
        cap_buf.height = list.height;
        cap_buf.offsets.assign(pixel_count + 1, 0);
        // Scatter band-local counts into the global per-pixel table.
        if (options.tiled) {
            for (int ty = 0; ty < list.tiles_y; ++ty) {
                for (int tx = 0; tx < list.tiles_x; ++tx) {
                    const BandCapture& band = bands[static_cast<std::size_t>(ty) * list.tiles_x + tx];
                    const int x0 = tx * kTileSize, y0 = ty * kTileSize;
                    const int x1 = std::min(x0 + kTileSize, list.width);
                    const int y1 = std::min(y0 + kTileSize, list.height);
                    int slot = 0;
                    for (int y = y0; y < y1; ++y) {
                        for (int x = x0; x < x1; ++x, ++slot) {
                            cap_buf.offsets[static_cast<std::size_t>(y) * list.width + x + 1] =
                                band.counts[slot];
                        }
                    }
                }
            }
        } else {
            for (int y = 0; y < list.height; ++y) {
                for (int x = 0; x < list.width; ++x) {
                    cap_buf.offsets[static_cast<std::size_t>(y) * list.width + x + 1] =
                        bands[y].counts[x];
                }
            }
        }
        for (std::size_t i = 0; i < pixel_count; ++i) cap_buf.offsets[i + 1] += cap_buf.offsets[i];
        cap_buf.records.resize(cap_buf.offsets.back());
        if (options.tiled) {
            for (int ty = 0; ty < list.tiles_y; ++ty) {
                for (int tx = 0; tx < list.tiles_x; ++tx) {
                    const BandCapture& band = bands[static_cast<std::size_t>(ty) * list.tiles_x + tx];
                    const int x0 = tx * kTileSize, y0 = ty * kTileSize;
                    const int x1 = std::min(x0 + kTileSize, list.width);
                    const int y1 = std::min(y0 + kTileSize, list.height);
                    std::size_t src = 0;
                    int slot = 0;
                    for (int y = y0; y < y1; ++y) {
                        for (int x = x0; x < x1; ++x, ++slot) {
                            const int n = band.counts[slot];
                            std::copy_n(band.records.begin() + src, n,
                                        cap_buf.records.begin() +
                                            cap_buf.offsets[static_cast<std::size_t>(y) * list.width + x]);
                            src += n;
                        }
                    }
                }
            }
        } else {
            for (int y = 0; y < list.height; ++y) {
                const BandCapture& band = bands[y];
                std::size_t src = 0;
                for (int x = 0; x < list.width; ++x) {
                    const int n = band.counts[x];
                    std::copy_n(band.records.begin() + src, n,
                                cap_buf.records.begin() +
                                    cap_buf.offsets[static_cast<std::size_t>(y) * list.width + x]);
                    src += n;
                }
            }
        }
        target.capture = std::move(cap_buf);
    }
    return target;
}

inline RenderTarget render(const Scene& scene, const Camera& camera,
                           const RasterOptions& options = RasterOptions{}, bool capture = false,
                           const Cov2dOverride* override_cov = nullptr) {
    const SplatList list = build_splat_list(scene, camera, options, override_cov);
    return composite_forward(list, scene.background, options, capture);
}

/// Oracle path: untiled, no cutoffs, no early termination. Slow and exact.
inline RenderTarget render_reference(const Scene& scene, const Camera& camera,
                                     double lambda_lp = kDefaultLowPass, bool capture = false,
                                     const Cov2dOverride* override_cov = nullptr) {
    RasterOptions options = RasterOptions::reference();
    options.lambda_lp = lambda_lp;
    return render(scene, camera, options, capture, override_cov);
}

// ---------------------------------------------------------------------------
// Capture inversion for the per-kernel solves
// ---------------------------------------------------------------------------

/// One captured splat-pixel pair, rearranged kernel-major. `behind` is the
/// color composited behind this splat (background included), so
/// d pixel / d alpha = transmittance * (view_color - behind).
struct SplatRecord {
    int px = 0;
    int py = 0;
    double weight = 0.0;
    double alpha = 0.0;
    double transmittance = 1.0;
    Vec3 view_color = Vec3::Zero();
    Vec3 behind = Vec3::Zero();
};

/// Kernel-major view of a capture buffer (CSR). Kernels with no surviving
/// splats have empty ranges.
struct InvertedCapture {
    std::vector<SplatRecord> records;
    std::vector<int> offsets;          // size kernel_count + 1
    std::vector<int> entry_of_kernel;  // index into SplatList::entries, -1 if culled

    std::span<const SplatRecord> records_for(int kernel) const {
        return {records.data() + offsets[kernel], records.data() + offsets[kernel + 1]};
    }
};

inline InvertedCapture invert_capture(const SplatList& list, const CaptureBuffer& capture,
                                      const Vec3& background, int kernel_count) {
    InvertedCapture inv;
    inv.entry_of_kernel.assign(kernel_count, -1);
    for (int i = 0; i < static_cast<int>(list.entries.size()); ++i) {
        inv.entry_of_kernel[list.entries[i].kernel] = i;
    }
    // Counting pass, then a single fill into the CSR layout.
    inv.offsets.assign(kernel_count + 1, 0);
    for (const PixelSplat& r : capture.records) {
        ++inv.offsets[list.entries[r.entry].kernel + 1];
    }
    for (int k = 0; k < kernel_count; ++k) inv.offsets[k + 1] += inv.offsets[k];
    inv.records.resize(capture.records.size());
    std::vector<int> cursor(inv.offsets.begin(), inv.offsets.end() - 1);
    std::vector<Vec3> behind;
    for (int y = 0; y < capture.height; ++y) {
        for (int x = 0; x < capture.width; ++x) {
            const auto records = capture.at(x, y);
            if (records.empty()) continue;
            behind.assign(records.size(), background);
            for (int i = static_cast<int>(records.size()) - 2; i >= 0; --i) {
                const auto& next = records[i + 1];
                const Vec3& cnext = list.entries[next.entry].view_color;
                behind[i] = next.alpha * cnext + (1.0 - next.alpha) * behind[i + 1];
            }
            for (std::size_t i = 0; i < records.size(); ++i) {
                const auto& r = records[i];
                const SplatEntry& e = list.entries[r.entry];
                inv.records[cursor[e.kernel]++] = SplatRecord{
                    x, y, r.weight, r.alpha, r.transmittance, e.view_color, behind[i]};
            }
        }
    }
    return inv;
}

}  // namespace ngs
