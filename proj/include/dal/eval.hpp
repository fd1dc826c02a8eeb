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

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dal/dataset.hpp"

namespace dal {

// ---- rasterization ---------------------------------------------------------

struct Mask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> bits;

    Mask() = default;
    Mask(int w, int h) : width(w), height(h), bits(std::size_t(w) * h, 0) {}
    std::uint8_t& at(int x, int y) { return bits[std::size_t(y) * width + x]; }
    std::uint8_t at(int x, int y) const { return bits[std::size_t(y) * width + x]; }
    long count() const {
        long n = 0;
        for (auto b : bits) n += b != 0;
        return n;
    }
};

/// Stroke a polyline at the given width (round joins and caps): a pixel is
/// set iff its center lies within width/2 of the polyline. Pixel (x, y)
/// has its center at (x + 0.5, y + 0.5).
inline Mask rasterize_rail(const std::vector<std::pair<double, double>>& points, double width,
                           int canvas_w, int canvas_h) {
    Mask mask(canvas_w, canvas_h);
    if (points.size() < 2) return mask;
    const double r = width / 2.0;
    const double r2 = r * r;
    for (std::size_t i = 0; i + 1 < points.size(); ++i) {
        const double ax = points[i].first, ay = points[i].second;
        const double bx = points[i + 1].first, by = points[i + 1].second;
        const int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - r - 1)));
        const int x1 = std::min(canvas_w - 1, static_cast<int>(std::ceil(std::max(ax, bx) + r)));
        const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - r - 1)));
        const int y1 = std::min(canvas_h - 1, static_cast<int>(std::ceil(std::max(ay, by) + r)));
        const double dx = bx - ax, dy = by - ay;
        const double len2 = dx * dx + dy * dy;
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                if (mask.at(x, y)) continue;
                const double px = x + 0.5 - ax;
                const double py = y + 0.5 - ay;
                double t = len2 > 0 ? (px * dx + py * dy) / len2 : 0.0;
                t = std::clamp(t, 0.0, 1.0);
                const double ex = px - t * dx;
                const double ey = py - t * dy;
                if (ex * ex + ey * ey <= r2) mask.at(x, y) = 1;
            }
        }
    }
    return mask;
}

inline double mask_iou(const Mask& a, const Mask& b) {
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        const bool pa = a.bits[i] != 0;
        const bool pb = b.bits[i] != 0;
        inter += pa && pb;
        uni += pa || pb;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---- instance matching -----------------------------------------------------

/// One image's matching outcome: the IoU of every matched (pred, gt) pair
/// plus the instance counts; per-threshold counts derive from it.
struct ImageMatch {
    std::vector<double> matched_ious;
    int n_preds = 0;
    int n_gts = 0;
};

namespace detail {

struct AssignState {
    const std::vector<std::vector<double>>* iou;  // [pred][gt], score-sorted preds
    std::vector<int> gt_used;
    std::vector<int> best_assign;   // per pred: gt index or -1
    std::vector<int> cur_assign;
    std::vector<double> best_vec;   // per-pred IoUs of the best solution
    double best_total = -1.0;
};

/// Exhaustive search maximizing (total IoU, per-pred IoU vector lexicographically
/// in score order). Pairs with zero IoU are never matched.
inline void assign_dfs(AssignState& st, std::size_t pred, double total,
                       std::vector<double>& vec) {
    const auto& iou = *st.iou;
    if (pred == iou.size()) {
        if (total > st.best_total + 1e-15 ||
            (std::abs(total - st.best_total) <= 1e-15 &&
             std::lexicographical_compare(st.best_vec.begin(), st.best_vec.end(), vec.begin(),
                                          vec.end()))) {
            st.best_total = total;
            st.best_assign = st.cur_assign;
            st.best_vec = vec;
        }
        return;
    }
    const std::size_t n_gts = st.gt_used.size();
    for (std::size_t g = 0; g < n_gts; ++g) {
        if (st.gt_used[g] || iou[pred][g] <= 0.0) continue;
        st.gt_used[g] = 1;
        st.cur_assign[pred] = static_cast<int>(g);
        vec[pred] = iou[pred][g];
        assign_dfs(st, pred + 1, total + iou[pred][g], vec);
        st.gt_used[g] = 0;
    }
    st.cur_assign[pred] = -1;
    vec[pred] = 0.0;
    assign_dfs(st, pred + 1, total, vec);
}

/// O(n^3) Hungarian algorithm on a square cost matrix (minimization).
inline std::vector<int> hungarian_min(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    std::vector<double> u(n + 1), v(n + 1);
    std::vector<int> p(n + 1), way(n + 1);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
        std::vector<char> used(n + 1, false);
        do {
            used[j0] = true;
            const int i0 = p[j0];
            double delta = std::numeric_limits<double>::infinity();
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> assign(n, -1);
    for (int j = 1; j <= n; ++j)
        if (p[j] > 0) assign[p[j] - 1] = j - 1;
    return assign;
}

}  // namespace detail

/// Maximum-total-IoU one-to-one assignment between predictions and ground
/// truths. Ties are broken toward higher-score predictions (their IoUs are
/// maximized lexicographically in score order). Instance counts above 9 a
/// side fall back to a Hungarian solve of the primary objective.
inline ImageMatch match_instances(const std::vector<std::vector<double>>& iou,
                                  const std::vector<double>& scores, int n_gts) {
    ImageMatch match;
    match.n_preds = static_cast<int>(iou.size());
    match.n_gts = n_gts;
    if (match.n_preds == 0 || n_gts == 0) return match;

    // sort predictions by score descending (stable on input order)
    std::vector<int> order(match.n_preds);
    for (int i = 0; i < match.n_preds; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[a] > scores[b];
    });
    std::vector<std::vector<double>> sorted(match.n_preds);
    for (int i = 0; i < match.n_preds; ++i) sorted[i] = iou[order[i]];

    std::vector<int> assign;
    if (match.n_preds <= 9 && n_gts <= 9) {
        detail::AssignState st;
        st.iou = &sorted;
        st.gt_used.assign(n_gts, 0);
        st.cur_assign.assign(match.n_preds, -1);
        st.best_assign.assign(match.n_preds, -1);
        st.best_vec.assign(match.n_preds, -1.0);
        std::vector<double> vec(match.n_preds, 0.0);
        detail::assign_dfs(st, 0, 0.0, vec);
        assign = st.best_assign;
    } else {
        const int n = std::max(match.n_preds, n_gts);
        std::vector<std::vector<double>> cost(n, std::vector<double>(n, 0.0));
        for (int i = 0; i < match.n_preds; ++i)
            for (int g = 0; g < n_gts; ++g) cost[i][g] = -std::max(0.0, sorted[i][g]);
        auto full = detail::hungarian_min(cost);
        assign.assign(match.n_preds, -1);
        for (int i = 0; i < match.n_preds; ++i)
            if (full[i] < n_gts && sorted[i][full[i]] > 0.0) assign[i] = full[i];
    }
    for (int i = 0; i < match.n_preds; ++i)
        if (assign[i] >= 0) match.matched_ious.push_back(sorted[i][assign[i]]);
    return match;
}

struct MatchCounts {
    long tp = 0, fp = 0, fn = 0;
};

/// Threshold one image's matching: matched pairs with IoU > tau are TP.
inline MatchCounts count_at_tau(const ImageMatch& match, double tau) {
    MatchCounts c;
    for (double iou : match.matched_ious) c.tp += iou > tau;
    c.fp = match.n_preds - c.tp;
    c.fn = match.n_gts - c.tp;
    return c;
}

// ---- reports ----------------------------------------------------------------

inline std::vector<double> standard_taus() {
    std::vector<double> taus;
    for (int i = 0; i < 10; ++i) taus.push_back(0.50 + 0.05 * i);
    return taus;
}

struct EvalReport {
    struct PerTau {
        double tau = 0;
        long tp = 0, fp = 0, fn = 0;
        double precision = 0, recall = 0, f1 = 0;
    };
    std::vector<PerTau> per_tau;
    double mf1 = 0;
    bool has_tusimple = false;
    double accuracy = 0, fdr = 0, fnr = 0;

    double f1_at(double tau) const {
        for (const auto& row : per_tau)
            if (std::abs(row.tau - tau) < 1e-9) return row.f1;
        throw std::out_of_range("tau not evaluated");
    }
};

/// Aggregate per-image matches into per-threshold counts and F1. 0/0
/// ratios resolve to 0. mF1 averages F1 over the threshold list.
inline EvalReport f1_scores(const std::vector<ImageMatch>& matches,
                            const std::vector<double>& taus = standard_taus()) {
    EvalReport report;
    double f1_sum = 0.0;
    for (double tau : taus) {
        EvalReport::PerTau row;
        row.tau = tau;
        for (const auto& m : matches) {
            const MatchCounts c = count_at_tau(m, tau);
            row.tp += c.tp;
            row.fp += c.fp;
            row.fn += c.fn;
        }
        row.precision = (row.tp + row.fp) > 0 ? double(row.tp) / double(row.tp + row.fp) : 0.0;
        row.recall = (row.tp + row.fn) > 0 ? double(row.tp) / double(row.tp + row.fn) : 0.0;
        row.f1 = (row.precision + row.recall) > 0
                     ? 2.0 * row.precision * row.recall / (row.precision + row.recall)
                     : 0.0;
        f1_sum += row.f1;
        report.per_tau.push_back(row);
    }
    report.mf1 = taus.empty() ? 0.0 : f1_sum / static_cast<double>(taus.size());
    return report;
}

inline void to_json(nlohmann::json& j, const EvalReport::PerTau& row) {
    j = nlohmann::json{{"tau", row.tau},
                       {"tp", row.tp},
                       {"fp", row.fp},
                       {"fn", row.fn},
                       {"precision", row.precision},
                       {"recall", row.recall},
                       {"f1", row.f1}};
}

inline void to_json(nlohmann::json& j, const EvalReport& report) {
    j = nlohmann::json{{"per_tau", report.per_tau}, {"mF1", report.mf1}};
    if (report.has_tusimple) {
        j["tusimple"] = {{"accuracy", report.accuracy},
                         {"fdr", report.fdr},
                         {"fnr", report.fnr}};
    }
}

inline void print_report(std::ostream& os, const EvalReport& report) {
    os << "  tau      TP      FP      FN   precision   recall       F1\n";
    for (const auto& row : report.per_tau) {
        os << std::fixed << std::setprecision(2) << std::setw(5) << row.tau << std::setw(8)
           << row.tp << std::setw(8) << row.fp << std::setw(8) << row.fn
           << std::setprecision(4) << std::setw(12) << row.precision << std::setw(9)
           << row.recall << std::setw(9) << row.f1 << "\n";
    }
    os << std::setprecision(4) << "  mF1 " << report.mf1 << "\n";
    if (report.has_tusimple) {
        os << "  point metrics: accuracy " << report.accuracy << "  FDR " << report.fdr
           << "  FNR " << report.fnr << "\n";
    }
}

// ---- point metrics -----------------------------------------------------------

struct TusimpleTotals {
    long correct_points = 0;  // sum of C_clip
    long gt_points = 0;       // sum of S_clip
    long tp = 0, fp = 0, fn = 0;

    double accuracy() const {
        return gt_points > 0 ? double(correct_points) / double(gt_points) : 0.0;
    }
    double fdr() const { return (tp + fp) > 0 ? double(fp) / double(tp + fp) : 0.0; }
    double fnr() const { return (tp + fn) > 0 ? double(fn) / double(tp + fn) : 0.0; }
};

/// Point accuracy on shared y-sample rows: a point is correct iff it lies
/// strictly within 20 px of the ground truth; each GT lane greedily pairs
/// with the unused prediction of highest point accuracy, and a pairing with
/// accuracy > 0.85 is a true positive.
inline void tusimple_accumulate(const DatasetRecord& pred, const DatasetRecord& gt,
                                TusimpleTotals& totals, double pixel_tol = 20.0,
                                double tp_threshold = 0.85) {
    if (pred.h_samples.size() != gt.h_samples.size())
        throw std::runtime_error("h_samples mismatch between prediction and ground truth");
    for (std::size_t i = 0; i < gt.h_samples.size(); ++i)
        if (std::abs(pred.h_samples[i] - gt.h_samples[i]) > 1e-6)
            throw std::runtime_error("h_samples mismatch between prediction and ground truth");

    std::vector<char> used(pred.lanes.size(), 0);
    long matched = 0;
    for (const auto& gt_lane : gt.lanes) {
        long n_gt_pts = 0;
        for (double x : gt_lane) n_gt_pts += x != kRowNotCovered;
        totals.gt_points += n_gt_pts;
        if (n_gt_pts == 0) continue;

        int best = -1;
        long best_correct = -1;
        for (std::size_t p = 0; p < pred.lanes.size(); ++p) {
            if (used[p]) continue;
            long correct = 0;
            for (std::size_t i = 0; i < gt_lane.size(); ++i) {
                if (gt_lane[i] == kRowNotCovered) continue;
                const double xp = pred.lanes[p][i];
                if (xp != kRowNotCovered && std::abs(xp - gt_lane[i]) < pixel_tol) ++correct;
            }
            if (correct > best_correct) {
                best_correct = correct;
                best = static_cast<int>(p);
            }
        }
        if (best >= 0) {
            used[best] = 1;
            totals.correct_points += best_correct;
            if (double(best_correct) / double(n_gt_pts) > tp_threshold) ++matched;
        }
    }
    totals.tp += matched;
    totals.fp += static_cast<long>(pred.lanes.size()) - matched;
    totals.fn += static_cast<long>(gt.lanes.size()) - matched;
}

}  // namespace dal
