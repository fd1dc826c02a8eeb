/*
 * Copyright 2026 dalnet contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "dal/geometry.hpp"
#include "dal/image.hpp"
#include "dal/rng.hpp"

namespace dal {

/// Procedural rail-scene generator. (cfg, index) fully determines the
/// output, so datasets are reproducible and indexable without state.
struct SceneConfig {
    int width = 800;
    int height = 320;
    int n_rows = 72;
    double gauge_min = 150.0;       // rail separation at the bottom edge, px
    double gauge_max = 200.0;
    double curvature_min = -30.0;   // lateral bend at the top, px
    double curvature_max = 30.0;
    double brightness_min = 0.35;   // background level in [0,1]
    double brightness_max = 0.75;
    double noise_sigma = 5.0;       // additive pixel noise (8-bit units)
    int occluders_min = 0;
    int occluders_max = 2;
    std::uint64_t seed = 0;

    void validate() const {
        if (width <= 0 || height <= 0 || n_rows < 2)
            throw std::invalid_argument("scene size invalid");
        if (gauge_max < gauge_min || curvature_max < curvature_min ||
            brightness_max < brightness_min || occluders_max < occluders_min)
            throw std::invalid_argument("scene config has an empty range");
        if (noise_sigma < 0) throw std::invalid_argument("noise_sigma must be >= 0");
    }

    ImageGrid grid() const { return {width, height, n_rows}; }
};

struct Scene {
    ImageU8 image;
    std::vector<RailAnnotation> rails;
};

namespace detail {

/// Both rails of the track as exact curves x(y); quadratic in the track
/// parameter, which is linear in y, so zero curvature means straight rails.
struct TrackCurves {
    double y_bottom, y_top;
    double x_bottom, x_top, curvature;
    double half_gauge_bottom, gauge_taper;  // taper in [0,1): fraction kept at the top

    double t_of_y(double y) const { return (y_bottom - y) / (y_bottom - y_top); }
    double center(double y) const {
        const double t = t_of_y(y);
        return x_bottom + (x_top - x_bottom) * t + curvature * t * t;
    }
    double half_gauge(double y) const {
        const double t = t_of_y(y);
        return half_gauge_bottom * (1.0 - (1.0 - gauge_taper) * t);
    }
    double rail_x(int side, double y) const {  // side: -1 left, +1 right
        return center(y) + side * half_gauge(y);
    }
};

}  // namespace detail

inline Scene generate_scene(const SceneConfig& cfg, int index) {
    cfg.validate();
    Rng rng = Rng::from_keys(cfg.seed, 0x5ce11e5ULL, static_cast<std::uint64_t>(index));
    const ImageGrid grid = cfg.grid();
    const double W = cfg.width;
    const double H = cfg.height;

    detail::TrackCurves track;
    track.y_bottom = H;
    track.y_top = rng.uniform(0.17, 0.26) * H;
    track.x_bottom = rng.uniform(0.38, 0.62) * W;
    track.x_top = track.x_bottom + rng.uniform(-0.08, 0.08) * W;
    track.curvature = rng.uniform(cfg.curvature_min, cfg.curvature_max);
    track.half_gauge_bottom = rng.uniform(cfg.gauge_min, cfg.gauge_max) / 2.0;
    track.gauge_taper = rng.uniform(0.12, 0.18);
    const double brightness = rng.uniform(cfg.brightness_min, cfg.brightness_max);
    const double rail_top_y = track.y_top + rng.uniform(0.0, 0.06) * H;
    const int n_occluders = rng.uniform_int(cfg.occluders_min, cfg.occluders_max);

    // annotations: the exact generating curves on the grid rows (computed
    // before any rendering, so occlusion never moves a label)
    Scene scene;
    const double rows_per_px = (grid.n_rows - 1) / H;
    const int s = std::max(0, static_cast<int>(std::ceil(rail_top_y * rows_per_px - 1e-9)));
    for (int side : {-1, +1}) {
        RailAnnotation rail;
        rail.xs = Eigen::ArrayXd::Zero(grid.n_rows);
        rail.start_index = s;
        rail.length = grid.n_rows - s;
        for (int i = s; i < grid.n_rows; ++i) rail.xs[i] = track.rail_x(side, grid.row_y(i));
        scene.rails.push_back(std::move(rail));
    }

    // background: vertical gradient, slightly blue sky over brown ballast
    ImageU8 img(cfg.width, cfg.height);
    const double sky = std::min(1.0, brightness + 0.25);
    for (int y = 0; y < cfg.height; ++y) {
        const double t = static_cast<double>(y) / cfg.height;
        const double level = sky * (1.0 - t) + brightness * t;
        const auto r8 = static_cast<std::uint8_t>(std::min(255.0, level * 255.0));
        const auto g8 = static_cast<std::uint8_t>(std::min(255.0, level * 250.0));
        const auto b8 = static_cast<std::uint8_t>(std::min(255.0, level * (230.0 + 25.0 * (1 - t))));
        for (int x = 0; x < cfg.width; ++x) {
            img.at(x, y, 0) = r8;
            img.at(x, y, 1) = g8;
            img.at(x, y, 2) = b8;
        }
    }

    // sleepers between the rails, spacing shrinks toward the top
    const std::uint8_t sleeper_level = static_cast<std::uint8_t>(brightness * 90);
    for (double y = H - 4.0; y > rail_top_y; y -= 4.0 + 16.0 * (1.0 - track.t_of_y(y))) {
        const double cx = track.center(y);
        const double hg = track.half_gauge(y) * 1.25;
        const double th = 1.0 + 2.5 * (1.0 - track.t_of_y(y));
        draw_segment(img, cx - hg, y, cx + hg, y, th,
                     {sleeper_level, sleeper_level, sleeper_level});
    }

    // rails: bright tapered strips
    const double rail_lvl = std::min(1.0, brightness + 0.45);
    const std::array<std::uint8_t, 3> rail_color{
        static_cast<std::uint8_t>(rail_lvl * 235),
        static_cast<std::uint8_t>(rail_lvl * 235),
        static_cast<std::uint8_t>(rail_lvl * 245)};
    for (int side : {-1, +1}) {
        double py = H;
        double px = track.rail_x(side, py);
        for (double y = H - 1.0; y >= rail_top_y; y -= 1.0) {
            const double x = track.rail_x(side, y);
            const double th = 1.5 + 4.0 * (1.0 - track.t_of_y(y));
            draw_segment(img, px, py, x, y, th, rail_color);
            px = x;
            py = y;
        }
    }

    for (int k = 0; k < n_occluders; ++k) {
        const int ow = rng.uniform_int(40, 150);
        const int oh = rng.uniform_int(30, 90);
        const int ox = rng.uniform_int(0, std::max(0, cfg.width - ow));
        const int oy = rng.uniform_int(static_cast<int>(rail_top_y),
                                       std::max(static_cast<int>(rail_top_y), cfg.height - oh));
        const std::array<std::uint8_t, 3> col{
            static_cast<std::uint8_t>(rng.uniform_int(40, 200)),
            static_cast<std::uint8_t>(rng.uniform_int(40, 200)),
            static_cast<std::uint8_t>(rng.uniform_int(40, 200))};
        fill_rect(img, ox, oy, ow, oh, col);
    }

    if (cfg.noise_sigma > 0) {
        for (std::size_t i = 0; i < img.rgb.size(); ++i) {
            const double v = img.rgb[i] + rng.normal(0.0, cfg.noise_sigma);
            img.rgb[i] = static_cast<std::uint8_t>(std::min(255.0, std::max(0.0, v)));
        }
    }

    scene.image = std::move(img);
    return scene;
}

// ---- augmentation ----------------------------------------------------------

/// Mirror horizontally: label map is x -> W - x, the image is resampled.
inline void flip_horizontal(ImageU8& img, std::vector<RailAnnotation>& rails, int width) {
    ImageU8 flipped(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) flipped.at(x, y, c) = img.at(img.width - 1 - x, y, c);
    img = std::move(flipped);
    for (auto& rail : rails)
        for (int i = rail.start_index; i <= rail.end_index(); ++i)
            rail.xs[i] = width - rail.xs[i];
}

/// Apply one affine map to image and labels. Transformed rails are
/// re-resampled onto the grid rows; rows whose x leaves [0, W] are trimmed
/// from the ends and rails shorter than 2 rows are dropped.
inline void apply_affine_to_sample(ImageU8& img, std::vector<RailAnnotation>& rails,
                                   const Affine2D& fwd, const ImageGrid& grid) {
    img = warp_affine(img, fwd);
    std::vector<RailAnnotation> kept;
    for (const auto& rail : rails) {
        std::vector<std::pair<double, double>> pts;
        for (int i = rail.start_index; i <= rail.end_index(); ++i)
            pts.push_back(fwd.apply(rail.xs[i], grid.row_y(i)));
        auto resampled = resample_polyline(pts, grid);
        if (!resampled) continue;
        int s = resampled->start_index;
        int e = resampled->end_index();
        auto in_image = [&](int i) {
            return resampled->xs[i] >= 0.0 && resampled->xs[i] <= grid.width_px;
        };
        while (s <= e && !in_image(s)) ++s;
        while (e >= s && !in_image(e)) --e;
        bool interior_ok = true;
        for (int i = s; i <= e; ++i) interior_ok = interior_ok && in_image(i);
        if (!interior_ok || e - s + 1 < 2) continue;
        resampled->start_index = s;
        resampled->length = e - s + 1;
        kept.push_back(std::move(*resampled));
    }
    rails = std::move(kept);
}

struct AugmentConfig {
    double flip_prob = 0.5;
    double max_rotation_deg = 6.0;
    double max_translation_frac = 0.10;
    double scale_min = 0.9;
    double scale_max = 1.1;
};

/// Random horizontal flip plus a random similarity transform (rotation,
/// translation, scale) applied identically to image and rails.
inline void augment(ImageU8& img, std::vector<RailAnnotation>& rails, const ImageGrid& grid,
                    Rng& rng, const AugmentConfig& cfg = {}) {
    if (rng.bernoulli(cfg.flip_prob)) flip_horizontal(img, rails, grid.width_px);
    const double angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * M_PI / 180.0;
    const double tx = rng.uniform(-cfg.max_translation_frac, cfg.max_translation_frac) *
                      grid.width_px;
    const double ty = rng.uniform(-cfg.max_translation_frac, cfg.max_translation_frac) *
                      grid.height_px;
    const double scale = rng.uniform(cfg.scale_min, cfg.scale_max);
    const Affine2D fwd = Affine2D::similarity(grid.width_px / 2.0, grid.height_px / 2.0,
                                              angle, scale, tx, ty);
    apply_affine_to_sample(img, rails, fwd, grid);
}

}  // namespace dal
