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

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "dal/geometry.hpp"

namespace dal {

template <typename T>
using MapArr = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic>;
using MapArrB = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
using MapArrI = Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic>;

/// Feature-stride cell of a pixel position. The bottom/right image edge
/// belongs to the last cell so rails ending exactly at y == height stay
/// on the map.
inline int cell_index(double v, int stride, int n_cells) {
    int c = static_cast<int>(std::floor(v / stride));
    return std::clamp(c, 0, n_cells - 1);
}

/// Ground-truth supervision maps at feature stride `stride`.
/// heatmap(row, col) in [0,1] peaks at 1 exactly on each rail's start cell;
/// offsets/slopes are defined wherever valid_mask is set (the (2r+1)^2
/// square around each start cell, clipped to the map).
template <typename T>
struct TargetMaps {
    int h4 = 0;
    int w4 = 0;
    int stride = 16;
    int radius = 2;         // r of the supervision square
    int n_rails = 0;        // N_p
    MapArr<T> heatmap;      // h4 x w4
    MapArr<T> offset_x;     // h4 x w4, stride units
    MapArr<T> offset_y;     // h4 x w4, stride units
    MapArr<T> slope;        // h4 x w4, radians
    MapArrB valid_mask;     // h4 x w4
    MapArrI instance_id;    // h4 x w4, -1 = background
};

struct Peak {
    int col = 0;
    int row = 0;
    double value = 0.0;
};

/// Start-cell positions of a rail set: bottom-most valid point of each
/// rail quantized to the stride grid. Rails whose start lies outside the
/// image are skipped.
template <typename T>
MapArr<T> encode_heatmap(const std::vector<RailAnnotation>& rails, const ImageGrid& grid,
                         int stride, double sigma,
                         std::vector<int>* skipped = nullptr) {
    const int h4 = grid.height_px / stride;
    const int w4 = grid.width_px / stride;
    MapArr<T> heat = MapArr<T>::Zero(h4, w4);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (std::size_t k = 0; k < rails.size(); ++k) {
        const auto& rail = rails[k];
        const int e = rail.end_index();
        const double x = rail.xs[e];
        const double y = grid.row_y(e);
        if (x < 0 || x > grid.width_px || y < 0 || y > grid.height_px) {
            if (skipped) skipped->push_back(static_cast<int>(k));
            continue;
        }
        const int cx = cell_index(x, stride, w4);
        const int cy = cell_index(y, stride, h4);
        for (int j = 0; j < h4; ++j) {
            for (int i = 0; i < w4; ++i) {
                double d2 = double(i - cx) * (i - cx) + double(j - cy) * (j - cy);
                T v = static_cast<T>(std::exp(-d2 * inv));
                // multiple rails combine by max, never sum
                if (v > heat(j, i)) heat(j, i) = v;
            }
        }
    }
    return heat;
}

/// Offset/slope targets on the (2r+1)^2 square around each start cell.
/// Where squares overlap the rail whose start is nearer (Euclidean, stride
/// units) wins; exact ties go to the lower rail index.
template <typename T>
void encode_offsets_and_slopes(const std::vector<RailAnnotation>& rails, const ImageGrid& grid,
                               int stride, int radius, TargetMaps<T>& maps) {
    const int h4 = maps.h4;
    const int w4 = maps.w4;
    maps.offset_x = MapArr<T>::Zero(h4, w4);
    maps.offset_y = MapArr<T>::Zero(h4, w4);
    maps.slope = MapArr<T>::Zero(h4, w4);
    maps.valid_mask = MapArrB::Constant(h4, w4, false);
    maps.instance_id = MapArrI::Constant(h4, w4, -1);
    MapArr<double> best_d2 = MapArr<double>::Constant(h4, w4, std::numeric_limits<double>::infinity());

    for (std::size_t k = 0; k < rails.size(); ++k) {
        const auto& rail = rails[k];
        const int e = rail.end_index();
        const double x = rail.xs[e];
        const double y = grid.row_y(e);
        if (x < 0 || x > grid.width_px || y < 0 || y > grid.height_px) continue;
        auto theta = rail_slope(rail, grid);
        if (!theta) continue;
        const int cx = cell_index(x, stride, w4);
        const int cy = cell_index(y, stride, h4);
        const double fx = x / stride;
        const double fy = y / stride;
        for (int ty = -radius; ty <= radius; ++ty) {
            for (int tx = -radius; tx <= radius; ++tx) {
                const int ci = cx + tx;
                const int cj = cy + ty;
                if (ci < 0 || ci >= w4 || cj < 0 || cj >= h4) continue;
                const double d2 = (fx - ci) * (fx - ci) + (fy - cj) * (fy - cj);
                if (maps.valid_mask(cj, ci) && d2 >= best_d2(cj, ci)) continue;
                best_d2(cj, ci) = d2;
                maps.valid_mask(cj, ci) = true;
                maps.instance_id(cj, ci) = static_cast<int>(k);
                maps.offset_x(cj, ci) = static_cast<T>(fx - cx - tx);
                maps.offset_y(cj, ci) = static_cast<T>(fy - cy - ty);
                maps.slope(cj, ci) = static_cast<T>(*theta);
            }
        }
    }
}

template <typename T>
TargetMaps<T> encode_targets(const std::vector<RailAnnotation>& rails, const ImageGrid& grid,
                             int stride, double sigma, int radius,
                             std::vector<int>* skipped = nullptr) {
    TargetMaps<T> maps;
    maps.h4 = grid.height_px / stride;
    maps.w4 = grid.width_px / stride;
    maps.stride = stride;
    maps.radius = radius;
    maps.n_rails = static_cast<int>(rails.size());
    maps.heatmap = encode_heatmap<T>(rails, grid, stride, sigma, skipped);
    encode_offsets_and_slopes<T>(rails, grid, stride, radius, maps);
    return maps;
}

/// 3x3 max-pool-and-compare peak picking. A cell is a peak iff it is the
/// lexicographically smallest (row, col) among the maxima of its own 3x3
/// window and its value clears the threshold. Returns at most k_max peaks
/// sorted by value descending (then (row, col) ascending).
template <typename T>
std::vector<Peak> extract_peaks(const MapArr<T>& heatmap, int k_max, double threshold) {
    const int h = static_cast<int>(heatmap.rows());
    const int w = static_cast<int>(heatmap.cols());
    std::vector<Peak> peaks;
    if (k_max <= 0) return peaks;
    for (int j = 0; j < h; ++j) {
        for (int i = 0; i < w; ++i) {
            const T v = heatmap(j, i);
            if (static_cast<double>(v) < threshold) continue;
            bool is_peak = true;
            for (int dj = -1; dj <= 1 && is_peak; ++dj) {
                for (int di = -1; di <= 1 && is_peak; ++di) {
                    if (dj == 0 && di == 0) continue;
                    const int nj = j + dj;
                    const int ni = i + di;
                    if (nj < 0 || nj >= h || ni < 0 || ni >= w) continue;
                    const T nv = heatmap(nj, ni);
                    if (nv > v) is_peak = false;
                    // neighbor with equal value that precedes (j,i) wins the tie
                    else if (nv == v && (nj < j || (nj == j && ni < i))) is_peak = false;
                }
            }
            if (is_peak) peaks.push_back({i, j, static_cast<double>(v)});
        }
    }
    std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
        if (a.value != b.value) return a.value > b.value;
        if (a.row != b.row) return a.row < b.row;
        return a.col < b.col;
    });
    if (static_cast<int>(peaks.size()) > k_max) peaks.resize(k_max);
    return peaks;
}

/// Anchor line from a heatmap peak plus the offset/slope read-outs at the
/// peak cell: start = stride * (peak + offset), theta clamped. Non-finite
/// read-outs reject the anchor.
template <typename T>
std::optional<AnchorLine> build_anchor(const Peak& peak, const MapArr<T>& offset_x,
                                       const MapArr<T>& offset_y, const MapArr<T>& slope,
                                       int stride) {
    const double ox = static_cast<double>(offset_x(peak.row, peak.col));
    const double oy = static_cast<double>(offset_y(peak.row, peak.col));
    const double th = static_cast<double>(slope(peak.row, peak.col));
    if (!std::isfinite(ox) || !std::isfinite(oy) || !std::isfinite(th)) return std::nullopt;
    AnchorLine a;
    a.x_start = stride * (peak.col + ox);
    a.y_start = stride * (peak.row + oy);
    a.theta = clamp_theta(th);
    a.score = peak.value;
    return a;
}

}  // namespace dal
