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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <dal/eval.hpp>
#include <dal/rng.hpp>

using namespace dal;

namespace {

// Exhaustive matching oracle for small instance counts: every injective
// pred -> gt-or-none map, scored by (total IoU, lexicographic IoU vector in
// score order), zero-IoU pairs unmatchable.
ImageMatch enumeration_oracle(const std::vector<std::vector<double>>& iou,
                              const std::vector<double>& scores, int n_gts) {
    ImageMatch out;
    out.n_preds = static_cast<int>(iou.size());
    out.n_gts = n_gts;
    if (out.n_preds == 0 || n_gts == 0) return out;

    std::vector<int> order(out.n_preds);
    for (int i = 0; i < out.n_preds; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });

    const int base = n_gts + 1;  // digit n_gts = unmatched
    long combos = 1;
    for (int i = 0; i < out.n_preds; ++i) combos *= base;

    double best_total = -1.0;
    std::vector<double> best_vec;
    for (long code = 0; code < combos; ++code) {
        long rest = code;
        std::vector<int> pick(out.n_preds);
        std::vector<char> used(n_gts, 0);
        bool feasible = true;
        for (int i = 0; i < out.n_preds && feasible; ++i) {
            pick[i] = static_cast<int>(rest % base);
            rest /= base;
            if (pick[i] < n_gts) {
                if (used[pick[i]] || iou[order[i]][pick[i]] <= 0.0) feasible = false;
                used[pick[i]] = 1;
            }
        }
        if (!feasible) continue;
        double total = 0.0;
        std::vector<double> vec(out.n_preds, 0.0);
        for (int i = 0; i < out.n_preds; ++i)
            if (pick[i] < n_gts) {
                vec[i] = iou[order[i]][pick[i]];
                total += vec[i];
            }
        if (total > best_total + 1e-15 ||
            (std::abs(total - best_total) <= 1e-15 &&
             std::lexicographical_compare(best_vec.begin(), best_vec.end(), vec.begin(),
                                          vec.end()))) {
            best_total = total;
            best_vec = vec;
        }
    }
    for (double v : best_vec)
        if (v > 0.0) out.matched_ious.push_back(v);
    return out;
}

Mask rect_mask(int canvas_w, int canvas_h, int x0, int y0, int w, int h) {
    Mask m(canvas_w, canvas_h);
    for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) m.at(x, y) = 1;
    return m;
}

}  // namespace

TEST_CASE("rasterize_rail: stadium area within a 1-pixel boundary band") {
    std::vector<std::pair<double, double>> seg{{100.0, 50.0}, {100.0, 150.0}};
    auto mask = rasterize_rail(seg, 30.0, 800, 320);
    const double area = 30.0 * 100.0 + M_PI * 15.0 * 15.0;
    const double perimeter = 2.0 * 100.0 + 2.0 * M_PI * 15.0;
    CHECK(std::abs(mask.count() - area) <= perimeter);
}

TEST_CASE("rasterize_rail: determinism, emptiness, disjointness") {
    std::vector<std::pair<double, double>> poly{{50.5, 20.0}, {60.0, 120.0}, {55.0, 250.0}};
    auto a = rasterize_rail(poly, 30.0, 800, 320);
    auto b = rasterize_rail(poly, 30.0, 800, 320);
    CHECK(a.bits == b.bits);
    CHECK(a.count() > 0);

    CHECK(rasterize_rail({{10.0, 10.0}}, 30.0, 800, 320).count() == 0);

    std::vector<std::pair<double, double>> far{{700.0, 20.0}, {700.0, 250.0}};
    auto c = rasterize_rail(far, 30.0, 800, 320);
    long overlap = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) overlap += a.bits[i] && c.bits[i];
    CHECK(overlap == 0);
}

TEST_CASE("rasterize_rail: translation-equivariant on integer shifts") {
    std::vector<std::pair<double, double>> poly{{90.0, 40.0}, {110.0, 150.0}, {95.0, 260.0}};
    std::vector<std::pair<double, double>> shifted;
    const int dx = 7, dy = 3;
    for (auto [x, y] : poly) shifted.emplace_back(x + dx, y + dy);
    auto a = rasterize_rail(poly, 30.0, 400, 320);
    auto b = rasterize_rail(shifted, 30.0, 400, 320);
    CHECK(a.count() == b.count());
    for (int y = 0; y + dy < 320; ++y)
        for (int x = 0; x + dx < 400; ++x) CHECK(a.at(x, y) == b.at(x + dx, y + dy));
}

TEST_CASE("mask_iou: identical, disjoint, half-overlapping") {
    auto a = rect_mask(100, 100, 10, 10, 40, 20);
    CHECK(mask_iou(a, a) == 1.0);

    auto b = rect_mask(100, 100, 60, 50, 20, 20);
    CHECK(mask_iou(a, b) == 0.0);

    // shifted by half the width: inter = 20*20, union = 2*40*20 - 400
    auto c = rect_mask(100, 100, 30, 10, 40, 20);
    CHECK(mask_iou(a, c) == doctest::Approx(400.0 / 1200.0).epsilon(1e-12));

    Mask empty(100, 100);
    CHECK(mask_iou(empty, empty) == 0.0);
}

TEST_CASE("match_instances: trivial cases") {
    // perfect predictions
    std::vector<std::vector<double>> iou{{1.0, 0.0}, {0.0, 1.0}};
    auto match = match_instances(iou, {0.9, 0.8}, 2);
    auto c = count_at_tau(match, 0.75);
    CHECK(c.tp == 2);
    CHECK(c.fp == 0);
    CHECK(c.fn == 0);

    // no predictions
    auto none = match_instances({}, {}, 3);
    auto c2 = count_at_tau(none, 0.5);
    CHECK(c2.tp == 0);
    CHECK(c2.fp == 0);
    CHECK(c2.fn == 3);
}

TEST_CASE("match_instances: 2x2 crossing case equals enumeration") {
    // pred0 overlaps both gts, pred1 only gt0: optimal pairs pred0-gt1
    std::vector<std::vector<double>> iou{{0.6, 0.5}, {0.4, 0.0}};
    std::vector<double> scores{0.9, 0.8};
    auto got = match_instances(iou, scores, 2);
    auto expect = enumeration_oracle(iou, scores, 2);
    CHECK(got.matched_ious == expect.matched_ious);
    auto c = count_at_tau(got, 0.45);
    CHECK(c.tp == 1);  // only the 0.5 pairing clears 0.45; 0.4 does not
    CHECK(c.fp == 1);
    CHECK(c.fn == 1);
}

TEST_CASE("match_instances: random small cases equal enumeration") {
    Rng rng(51);
    for (int trial = 0; trial < 300; ++trial) {
        const int n_preds = rng.uniform_int(0, 4);
        const int n_gts = rng.uniform_int(0, 4);
        std::vector<std::vector<double>> iou(n_preds, std::vector<double>(n_gts, 0.0));
        for (auto& row : iou)
            for (auto& v : row) v = rng.bernoulli(0.4) ? 0.0 : rng.uniform_int(0, 8) / 8.0;
        std::vector<double> scores(n_preds);
        for (auto& s : scores) s = rng.uniform(0.0, 1.0);
        auto got = match_instances(iou, scores, n_gts);
        auto expect = enumeration_oracle(iou, scores, n_gts);
        REQUIRE(got.matched_ious.size() == expect.matched_ious.size());
        auto a = got.matched_ious;
        auto b = expect.matched_ious;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        CHECK(a == b);
    }
}

TEST_CASE("match_instances: hungarian fallback agrees on the total") {
    Rng rng(53);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = rng.uniform_int(2, 6);
        std::vector<std::vector<double>> iou(n, std::vector<double>(n, 0.0));
        for (auto& row : iou)
            for (auto& v : row) v = rng.uniform(0.0, 1.0);
        std::vector<std::vector<double>> cost(n, std::vector<double>(n, 0.0));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) cost[i][j] = -iou[i][j];
        auto assign = detail::hungarian_min(cost);
        double hungarian_total = 0.0;
        for (int i = 0; i < n; ++i) hungarian_total += iou[i][assign[i]];

        std::vector<double> scores(n, 1.0);
        auto dfs = match_instances(iou, scores, n);
        double dfs_total = 0.0;
        for (double v : dfs.matched_ious) dfs_total += v;
        CHECK(hungarian_total == doctest::Approx(dfs_total).epsilon(1e-9));
    }
}

TEST_CASE("f1_scores: scalar cases and conventions") {
    // P = R = 1 at every threshold
    ImageMatch perfect;
    perfect.n_preds = 2;
    perfect.n_gts = 2;
    perfect.matched_ious = {1.0, 1.0};
    auto report = f1_scores({perfect});
    for (const auto& row : report.per_tau) CHECK(row.f1 == 1.0);
    CHECK(report.mf1 == 1.0);
    CHECK(report.f1_at(0.5) == 1.0);

    // TP=1, FP=1, FN=0: P=0.5, R=1, F1=2/3
    ImageMatch m;
    m.n_preds = 2;
    m.n_gts = 1;
    m.matched_ious = {0.99};
    auto r2 = f1_scores({m}, {0.5});
    CHECK(r2.per_tau[0].precision == doctest::Approx(0.5));
    CHECK(r2.per_tau[0].recall == doctest::Approx(1.0));
    CHECK(r2.per_tau[0].f1 == doctest::Approx(2.0 / 3.0));

    // degenerate: no predictions, no gts
    ImageMatch empty;
    auto r3 = f1_scores({empty}, {0.5});
    CHECK(r3.per_tau[0].f1 == 0.0);
}

TEST_CASE("f1_scores: monotone in tau, mF1 bounded by F1@50") {
    Rng rng(57);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<ImageMatch> matches;
        for (int img = 0; img < 5; ++img) {
            ImageMatch m;
            m.n_preds = rng.uniform_int(0, 4);
            m.n_gts = rng.uniform_int(0, 4);
            const int matched = std::min({m.n_preds, m.n_gts, rng.uniform_int(0, 4)});
            for (int k = 0; k < matched; ++k) m.matched_ious.push_back(rng.uniform(0.0, 1.0));
            matches.push_back(std::move(m));
        }
        auto report = f1_scores(matches);
        for (std::size_t i = 1; i < report.per_tau.size(); ++i)
            CHECK(report.per_tau[i].f1 <= report.per_tau[i - 1].f1 + 1e-12);
        CHECK(report.mf1 <= report.f1_at(0.5) + 1e-12);
    }
}

TEST_CASE("f1_scores: invariant under instance permutation") {
    std::vector<std::vector<double>> iou{{0.9, 0.1, 0.0}, {0.2, 0.7, 0.3}, {0.0, 0.1, 0.55}};
    std::vector<double> scores{0.8, 0.7, 0.6};
    auto base = match_instances(iou, scores, 3);

    // permute predictions (rows) and gts (columns)
    std::vector<std::vector<double>> perm{{0.3, 0.2, 0.7}, {0.55, 0.0, 0.1}, {0.0, 0.9, 0.1}};
    std::vector<double> perm_scores{0.7, 0.6, 0.8};
    auto shuffled = match_instances(perm, perm_scores, 3);

    auto a = f1_scores({base});
    auto b = f1_scores({shuffled});
    for (std::size_t i = 0; i < a.per_tau.size(); ++i) CHECK(a.per_tau[i].f1 == b.per_tau[i].f1);
}

TEST_CASE("tusimple metrics: exact, 19 px and 21 px shifts") {
    const int rows = 20;
    DatasetRecord gt;
    gt.raw_file = "a.png";
    for (int i = 0; i < rows; ++i) gt.h_samples.push_back(10.0 * i);
    std::vector<double> lane(rows);
    for (int i = 0; i < rows; ++i) lane[i] = 200.0 + i;
    gt.lanes.push_back(lane);
    std::vector<double> lane2(rows, kRowNotCovered);
    for (int i = 5; i < rows; ++i) lane2[i] = 500.0 - i;
    gt.lanes.push_back(lane2);

    auto shifted = [&](double dx) {
        DatasetRecord pred = gt;
        for (auto& l : pred.lanes)
            for (auto& x : l)
                if (x != kRowNotCovered) x += dx;
        pred.scores.assign(pred.lanes.size(), 0.9);
        return pred;
    };

    {
        TusimpleTotals t;
        tusimple_accumulate(shifted(0.0), gt, t);
        CHECK(t.accuracy() == 1.0);
        CHECK(t.fdr() == 0.0);
        CHECK(t.fnr() == 0.0);
    }
    {
        TusimpleTotals t;
        tusimple_accumulate(shifted(19.0), gt, t);  // strictly within 20
        CHECK(t.accuracy() == 1.0);
        CHECK(t.fdr() == 0.0);
        CHECK(t.fnr() == 0.0);
    }
    {
        TusimpleTotals t;
        tusimple_accumulate(shifted(21.0), gt, t);
        CHECK(t.accuracy() == 0.0);
        CHECK(t.tp == 0);
        CHECK(t.fn == 2);
        CHECK(t.fp == 2);
    }
}

TEST_CASE("tusimple metrics: h_samples mismatch is an error") {
    DatasetRecord gt;
    gt.h_samples = {0.0, 10.0};
    DatasetRecord pred;
    pred.h_samples = {0.0, 12.0};
    TusimpleTotals t;
    CHECK_THROWS_AS(tusimple_accumulate(pred, gt, t), std::runtime_error);
}
