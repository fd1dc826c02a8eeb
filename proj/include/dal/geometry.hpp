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
#include <optional>
#include <vector>

namespace dal {

/// Fixed row lattice of an image. Rails are stored as one x-coordinate per
/// lattice row. Image convention: y grows downward, row 0 is the top edge
/// and row n_rows-1 is the bottom edge (y == height_px).
struct ImageGrid {
    int width_px = 800;
    int height_px = 320;
    int n_rows = 72;

    double row_y(int i) const {
        return static_cast<double>(height_px) * i / (n_rows - 1);
    }
    bool valid() const { return width_px > 0 && height_px > 0 && n_rows >= 2; }
};

/// A rail as x-coordinates on the grid rows. Only rows in
/// [start_index, start_index + length - 1] are meaningful. The rail's
/// starting point (anchor seed) is the *bottom-most* valid point, i.e.
/// row end_index(): bottom starts of ego rails are well separated while
/// rails converge near the vanishing point.
struct RailAnnotation {
    Eigen::ArrayXd xs;  // size n_rows
    int start_index = 0;
    int length = 0;

    int end_index() const { return start_index + length - 1; }
    bool row_valid(int i) const { return i >= start_index && i <= end_index(); }
    bool valid(const ImageGrid& grid) const {
        return start_index >= 0 && length >= 2 &&
               start_index + length <= grid.n_rows && xs.size() == grid.n_rows;
    }
};

/// Reference ray seeded at (x_start, y_start) and traced upward (toward
/// row 0) at angle theta to the image x-axis, theta in (0, pi).
struct AnchorLine {
    double x_start = 0.0;
    double y_start = 0.0;
    double theta = M_PI / 2;
    double score = 1.0;
};

/// A rail hypothesis: per-row horizontal offsets from an anchor line plus a
/// predicted row range. delta_x has one entry per grid row; only rows in
/// [start_index, start_index + length - 1] are meaningful.
struct RailProposal {
    AnchorLine anchor;
    Eigen::ArrayXd delta_x;
    int start_index = 0;
    int length = 0;
    double score = 1.0;
};

// Near-horizontal anchors are geometrically meaningless for rails; theta is
// clamped before evaluating cot so |cot(theta)| stays bounded (~50).
inline constexpr double kThetaMin = 0.02;

inline double clamp_theta(double theta) {
    return std::clamp(theta, kThetaMin, M_PI - kThetaMin);
}

/// x-coordinate of the anchor ray at image row y. |y - y_start| makes the
/// formula independent of the enumeration direction; rows below the start
/// mirror the ray.
inline double anchor_x_at_row(const AnchorLine& anchor, double y) {
    double theta = clamp_theta(anchor.theta);
    return anchor.x_start + std::abs(y - anchor.y_start) / std::tan(theta);
}

/// Mean angle between the bottom-most valid point and every other valid
/// point, in (0, pi). The degenerate self-term arctan2(0, 0) at the start
/// is excluded; the average runs over the remaining length-1 points.
inline std::optional<double> rail_slope(const RailAnnotation& rail, const ImageGrid& grid) {
    if (!rail.valid(grid)) return std::nullopt;
    const int e = rail.end_index();
    const double xe = rail.xs[e];
    const double ye = grid.row_y(e);
    double sum = 0.0;
    for (int i = rail.start_index; i < e; ++i) {
        sum += std::atan2(std::abs(grid.row_y(i) - ye), rail.xs[i] - xe);
    }
    return sum / (rail.length - 1);
}

/// Anchor seeded exactly at the rail's starting point with the rail's mean
/// slope. For straight rails the ray reproduces the rail.
inline std::optional<AnchorLine> anchor_from_rail(const RailAnnotation& rail,
                                                  const ImageGrid& grid) {
    auto slope = rail_slope(rail, grid);
    if (!slope) return std::nullopt;
    const int e = rail.end_index();
    return AnchorLine{rail.xs[e], grid.row_y(e), clamp_theta(*slope), 1.0};
}

/// N uniformly spaced sample points on the anchor ray from the start up to
/// row 0, as (x, y) pixel coordinates.
inline std::vector<std::pair<double, double>> sample_anchor_points(const AnchorLine& anchor,
                                                                   int n_samples,
                                                                   const ImageGrid& grid) {
    (void)grid;
    std::vector<std::pair<double, double>> pts;
    pts.reserve(n_samples);
    for (int j = 0; j < n_samples; ++j) {
        double y = anchor.y_start * (1.0 - static_cast<double>(j) / (n_samples - 1));
        pts.emplace_back(anchor_x_at_row(anchor, y), y);
    }
    return pts;
}

/// Apply per-row offsets to the anchor reference. Decoded x-coordinates
/// are clipped to [-W/2, 3W/2]: off-image but finite.
inline RailAnnotation decode_proposal(const RailProposal& p, const ImageGrid& grid) {
    RailAnnotation out;
    out.xs = Eigen::ArrayXd::Zero(grid.n_rows);
    out.start_index = p.start_index;
    out.length = p.length;
    const double lo = -0.5 * grid.width_px;
    const double hi = 1.5 * grid.width_px;
    for (int i = p.start_index; i <= p.start_index + p.length - 1; ++i) {
        double x = anchor_x_at_row(p.anchor, grid.row_y(i)) + p.delta_x[i];
        out.xs[i] = std::clamp(x, lo, hi);
    }
    return out;
}

/// Resample a free-form polyline (>= 2 points, strictly monotonic y after
/// sorting) onto the grid rows by linear interpolation. Returns nullopt if
/// fewer than 2 rows are covered.
inline std::optional<RailAnnotation> resample_polyline(
    std::vector<std::pair<double, double>> raw_points, const ImageGrid& grid) {
    if (raw_points.size() < 2) return std::nullopt;
    std::sort(raw_points.begin(), raw_points.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });
    for (std::size_t i = 1; i < raw_points.size(); ++i) {
        if (!(raw_points[i].second > raw_points[i - 1].second)) return std::nullopt;
    }
    const double y_lo = raw_points.front().second;
    const double y_hi = raw_points.back().second;
    const double rows_per_px = (grid.n_rows - 1) / static_cast<double>(grid.height_px);
    // 1e-9 pad so rows landing exactly on the span boundary are kept.
    int i_lo = static_cast<int>(std::ceil(y_lo * rows_per_px - 1e-9));
    int i_hi = static_cast<int>(std::floor(y_hi * rows_per_px + 1e-9));
    i_lo = std::max(i_lo, 0);
    i_hi = std::min(i_hi, grid.n_rows - 1);
    if (i_hi - i_lo + 1 < 2) return std::nullopt;

    RailAnnotation rail;
    rail.xs = Eigen::ArrayXd::Zero(grid.n_rows);
    rail.start_index = i_lo;
    rail.length = i_hi - i_lo + 1;
    std::size_t seg = 0;
    for (int i = i_lo; i <= i_hi; ++i) {
        const double y = grid.row_y(i);
        while (seg + 2 < raw_points.size() && raw_points[seg + 1].second < y) ++seg;
        const auto& a = raw_points[seg];
        const auto& b = raw_points[seg + 1];
        const double t = std::clamp((y - a.second) / (b.second - a.second), 0.0, 1.0);
        rail.xs[i] = a.first + t * (b.first - a.first);
    }
    return rail;
}

}  // namespace dal
