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

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "dal/label_codec.hpp"

namespace dal {

struct LossWeights {
    double heat = 1.0;
    double offset = 1.0;
    double slope = 3.0;
    double sl = 0.3;
    double liou = 6.0;
    double alpha = 2.0;       // focal exponent on the prediction
    double beta = 4.0;        // focal penalty reduction near positives
    double liou_radius = 7.5; // e, px at input scale
};

template <typename T>
struct LossParts {
    T heat = 0;
    T offset = 0;
    T slope = 0;
    T sl = 0;
    T liou = 0;
};

template <typename T>
T smooth_l1(T d) {
    T a = std::abs(d);
    return a < T(1) ? T(0.5) * d * d : a - T(0.5);
}

template <typename T>
T smooth_l1_grad(T d) {
    if (d > T(1)) return T(1);
    if (d < T(-1)) return T(-1);
    return d;
}

/// Penalty-reduced focal loss over the start-point heatmap. Positives are
/// the cells where the target equals 1 exactly; elsewhere the penalty is
/// attenuated by (1-target)^beta. Normalized by the rail count (1 when the
/// image has no rails). `grad` (optional) receives dL/dpred.
template <typename T>
T focal_heatmap_loss(const MapArr<T>& pred, const MapArr<T>& target, int n_rails,
                     double alpha, double beta, MapArr<T>* grad = nullptr) {
    const T norm = T(1) / T(std::max(n_rails, 1));
    const T a = static_cast<T>(alpha);
    const T b = static_cast<T>(beta);
    if (grad) *grad = MapArr<T>::Zero(pred.rows(), pred.cols());
    T loss = 0;
    for (Eigen::Index j = 0; j < pred.rows(); ++j) {
        for (Eigen::Index i = 0; i < pred.cols(); ++i) {
            const T p = pred(j, i);
            const T t = target(j, i);
            if (t == T(1)) {
                const T om = T(1) - p;
                loss -= std::pow(om, a) * std::log(p);
                if (grad)
                    (*grad)(j, i) = -norm * (-a * std::pow(om, a - T(1)) * std::log(p) +
                                             std::pow(om, a) / p);
            } else {
                const T w = std::pow(T(1) - t, b);
                loss -= w * std::pow(p, a) * std::log(T(1) - p);
                if (grad)
                    (*grad)(j, i) = -norm * w * (a * std::pow(p, a - T(1)) * std::log(T(1) - p) -
                                                 std::pow(p, a) / (T(1) - p));
            }
        }
    }
    return loss * norm;
}

/// Smooth-L1 on both offset channels over the valid region, normalized by
/// N_p*(2r+1)^2 (clipped border cells still count toward the normalizer).
template <typename T>
T offset_loss(const MapArr<T>& pred_x, const MapArr<T>& pred_y, const TargetMaps<T>& target,
              MapArr<T>* grad_x = nullptr, MapArr<T>* grad_y = nullptr) {
    if (grad_x) *grad_x = MapArr<T>::Zero(target.h4, target.w4);
    if (grad_y) *grad_y = MapArr<T>::Zero(target.h4, target.w4);
    if (target.n_rails == 0 || !target.valid_mask.any()) return T(0);
    const int side = 2 * target.radius + 1;
    const T norm = T(1) / (T(target.n_rails) * T(side) * T(side));
    T loss = 0;
    for (int j = 0; j < target.h4; ++j) {
        for (int i = 0; i < target.w4; ++i) {
            if (!target.valid_mask(j, i)) continue;
            const T dx = pred_x(j, i) - target.offset_x(j, i);
            const T dy = pred_y(j, i) - target.offset_y(j, i);
            loss += smooth_l1(dx) + smooth_l1(dy);
            if (grad_x) (*grad_x)(j, i) = norm * smooth_l1_grad(dx);
            if (grad_y) (*grad_y)(j, i) = norm * smooth_l1_grad(dy);
        }
    }
    return loss * norm;
}

/// L1 on the slope channel over the valid region, same normalizer as the
/// offset loss.
template <typename T>
T slope_loss(const MapArr<T>& pred, const TargetMaps<T>& target, MapArr<T>* grad = nullptr) {
    if (grad) *grad = MapArr<T>::Zero(target.h4, target.w4);
    if (target.n_rails == 0 || !target.valid_mask.any()) return T(0);
    const int side = 2 * target.radius + 1;
    const T norm = T(1) / (T(target.n_rails) * T(side) * T(side));
    T loss = 0;
    for (int j = 0; j < target.h4; ++j) {
        for (int i = 0; i < target.w4; ++i) {
            if (!target.valid_mask(j, i)) continue;
            const T d = pred(j, i) - target.slope(j, i);
            loss += std::abs(d);
            if (grad) (*grad)(j, i) = norm * (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)));
        }
    }
    return loss * norm;
}

/// Smooth-L1 on the normalized (start, length) pair, mean over matched
/// proposals and both components.
template <typename T>
T range_loss(const std::vector<std::pair<T, T>>& pred, const std::vector<std::pair<T, T>>& gt,
             std::vector<std::pair<T, T>>* grad = nullptr) {
    if (grad) grad->assign(pred.size(), {T(0), T(0)});
    if (pred.empty()) return T(0);
    const T norm = T(1) / (T(pred.size()) * T(2));
    T loss = 0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
        const T ds = pred[k].first - gt[k].first;
        const T dl = pred[k].second - gt[k].second;
        loss += smooth_l1(ds) + smooth_l1(dl);
        if (grad) (*grad)[k] = {norm * smooth_l1_grad(ds), norm * smooth_l1_grad(dl)};
    }
    return loss * norm;
}

/// Line IoU of one proposal against its ground truth over the GT valid rows
/// [row_begin, row_end]: rails thickened to intervals of radius e per row,
/// overlap and union summed over rows. The overlap term may go negative for
/// disjoint rails, which keeps pulling them together. Returns 1 - LIoU.
template <typename T>
T line_iou_loss_single(const Eigen::Array<T, Eigen::Dynamic, 1>& pred_xs,
                       const Eigen::Array<T, Eigen::Dynamic, 1>& gt_xs, int row_begin,
                       int row_end, double radius,
                       Eigen::Array<T, Eigen::Dynamic, 1>* grad = nullptr) {
    if (grad) *grad = Eigen::Array<T, Eigen::Dynamic, 1>::Zero(pred_xs.size());
    if (row_end < row_begin) return T(0);
    const T e = static_cast<T>(radius);
    T overlap = 0;
    T uni = 0;
    for (int i = row_begin; i <= row_end; ++i) {
        const T xp = pred_xs[i];
        const T xg = gt_xs[i];
        overlap += std::min(xp + e, xg + e) - std::max(xp - e, xg - e);
        uni += std::max(xp + e, xg + e) - std::min(xp - e, xg - e);
    }
    const T liou = overlap / uni;
    if (grad) {
        // d(1 - O/U)/dxp_i = sgn(xp_i - xg_i) * (U + O) / U^2
        const T common = (uni + overlap) / (uni * uni);
        for (int i = row_begin; i <= row_end; ++i) {
            const T d = pred_xs[i] - gt_xs[i];
            (*grad)[i] = (d > T(0) ? common : (d < T(0) ? -common : T(0)));
        }
    }
    return T(1) - liou;
}

/// Weighted sum of the loss parts. Non-finite parts abort the step.
template <typename T>
T total_loss(const LossParts<T>& parts, const LossWeights& w) {
    const T vals[5] = {parts.heat, parts.offset, parts.slope, parts.sl, parts.liou};
    const char* names[5] = {"heat", "offset", "slope", "sl", "liou"};
    for (int i = 0; i < 5; ++i) {
        if (!std::isfinite(static_cast<double>(vals[i]))) {
            std::ostringstream msg;
            msg << "non-finite loss part '" << names[i] << "'";
            throw std::runtime_error(msg.str());
        }
    }
    return static_cast<T>(w.heat) * parts.heat + static_cast<T>(w.offset) * parts.offset +
           static_cast<T>(w.slope) * parts.slope + static_cast<T>(w.sl) * parts.sl +
           static_cast<T>(w.liou) * parts.liou;
}

}  // namespace dal
