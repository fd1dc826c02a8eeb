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

#include <dal/nn/model.hpp>
#include <dal/rng.hpp>

#include "testing_util.hpp"

using namespace dal;
using namespace dal::nn;
using dal::testing::central_diff;
using dal::testing::rel_err;

namespace {

ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.input_h = 64;
    cfg.input_w = 96;
    cfg.stage_widths = {4, 4, 8, 8};
    cfg.fpn_channels = 8;
    cfg.generator_hidden = 8;
    cfg.n_sample_points = 6;
    cfg.n_rows = 10;
    cfg.ppm_bins = {1, 2, 3};
    return cfg;
}

template <typename T>
Tensor<T> random_image(Rng& rng, int h, int w) {
    Tensor<T> img(3, h, w);
    for (Eigen::Index i = 0; i < img.data.size(); ++i)
        img.data[i] = static_cast<T>(rng.uniform(-0.5, 0.5));
    return img;
}

RailAnnotation toy_rail(const ImageGrid& grid, double x_bottom, double dx_per_row, int s,
                        int l) {
    RailAnnotation rail;
    rail.xs = Eigen::ArrayXd::Zero(grid.n_rows);
    rail.start_index = s;
    rail.length = l;
    const int e = s + l - 1;
    for (int i = s; i <= e; ++i) rail.xs[i] = x_bottom + dx_per_row * (e - i);
    return rail;
}

struct ToyBatch {
    Tensor<double> image;
    std::vector<RailAnnotation> rails;
    TargetMaps<double> targets;
};

ToyBatch make_toy_batch(const ModelConfig& cfg, Rng& rng) {
    ToyBatch b;
    b.image = random_image<double>(rng, cfg.input_h, cfg.input_w);
    const ImageGrid grid = cfg.grid();
    b.rails.push_back(toy_rail(grid, rng.uniform(20.0, 40.0), rng.uniform(-1.0, 1.0),
                               rng.uniform_int(0, 2), rng.uniform_int(4, 7)));
    b.rails.push_back(toy_rail(grid, rng.uniform(60.0, 80.0), rng.uniform(-1.0, 1.0),
                               rng.uniform_int(0, 2), rng.uniform_int(4, 7)));
    b.targets = encode_targets<double>(b.rails, grid, ModelConfig::kStrideP4, 2.0, 1);
    return b;
}

}  // namespace

TEST_CASE("shape contract at the reference input size") {
    ModelConfig cfg;  // 320x800 defaults
    DalnetModel<float> model(cfg);
    model.init_params(1);
    Rng rng(2);
    auto img = random_image<float>(rng, 320, 800);
    ForwardTrace<float> tr;
    model.forward_features(img, tr);

    CHECK(tr.keep_act[1].c == 32);  // stride 8
    CHECK(tr.keep_act[1].h == 40);
    CHECK(tr.keep_act[1].w == 100);
    CHECK(tr.keep_act[2].c == 64);  // stride 16
    CHECK(tr.keep_act[2].h == 20);
    CHECK(tr.keep_act[2].w == 50);
    CHECK(tr.keep_act[3].c == 64);  // stride 32
    CHECK(tr.keep_act[3].h == 10);
    CHECK(tr.keep_act[3].w == 25);

    for (const Tensor<float>* p : {&tr.p3, &tr.p4, &tr.p5}) CHECK(p->c == 64);
    CHECK(tr.p3.h == 40);
    CHECK(tr.p3.w == 100);
    CHECK(tr.p4.h == 20);
    CHECK(tr.p4.w == 50);
    CHECK(tr.p5.h == 10);
    CHECK(tr.p5.w == 25);

    model.forward_generator(tr);
    CHECK(tr.heat_prob.c == 1);
    CHECK(tr.heat_prob.h == 20);
    CHECK(tr.heat_prob.w == 50);
    CHECK(tr.off_map.c == 2);
    CHECK(tr.slope_map.c == 1);
    CHECK((tr.heat_prob.data > 0.0f).all());
    CHECK((tr.heat_prob.data < 1.0f).all());
    CHECK((tr.slope_map.data > 0.0f).all());
    CHECK((tr.slope_map.data < float(M_PI)).all());

    AnchorLine anchor{400.0, 318.0, M_PI / 2, 1.0};
    auto pred = model.forward_head(anchor, tr);
    CHECK(pred.delta_x.size() == 72);
    CHECK(tr.head_out.back().size() == 74);
}

TEST_CASE("doubling the input width doubles every stage width") {
    ModelConfig cfg = toy_config();
    DalnetModel<float> model(cfg);
    model.init_params(3);
    Rng rng(4);

    ModelConfig wide = cfg;
    wide.input_w *= 2;
    DalnetModel<float> model_wide(wide);
    model_wide.init_params(3);

    ForwardTrace<float> tr, trw;
    model.forward_features(random_image<float>(rng, cfg.input_h, cfg.input_w), tr);
    model_wide.forward_features(random_image<float>(rng, wide.input_h, wide.input_w), trw);
    CHECK(trw.stem_act.w == 2 * tr.stem_act.w);
    for (int i = 0; i < 4; ++i) CHECK(trw.keep_act[i].w == 2 * tr.keep_act[i].w);
    CHECK(trw.p3.w == 2 * tr.p3.w);
}

TEST_CASE("config validation rejects bad divisibility") {
    ModelConfig cfg = toy_config();
    cfg.input_w = 100;
    CHECK_THROWS_AS((void)DalnetModel<float>{cfg}, std::invalid_argument);
}

TEST_CASE("zero image produces finite activations") {
    ModelConfig cfg = toy_config();
    DalnetModel<float> model(cfg);
    model.init_params(5);
    Tensor<float> zero(3, cfg.input_h, cfg.input_w);
    ForwardTrace<float> tr;
    model.forward_features(zero, tr);
    model.forward_generator(tr);
    CHECK(tr.p3.data.isFinite().all());
    CHECK(tr.heat_prob.data.isFinite().all());
    CHECK(tr.off_map.data.isFinite().all());
    CHECK(tr.slope_map.data.isFinite().all());
}

TEST_CASE("zero parameters give a zero pyramid") {
    ModelConfig cfg = toy_config();
    DalnetModel<float> model(cfg);  // built but not initialized: all zeros
    Rng rng(6);
    ForwardTrace<float> tr;
    model.forward_features(random_image<float>(rng, cfg.input_h, cfg.input_w), tr);
    CHECK(tr.p3.data.abs().maxCoeff() == 0.0f);
    CHECK(tr.p4.data.abs().maxCoeff() == 0.0f);
    CHECK(tr.p5.data.abs().maxCoeff() == 0.0f);
}

TEST_CASE("ppm: constant input stays constant, 1x1 bin is the global mean") {
    ModelConfig cfg = toy_config();
    DalnetModel<double> model(cfg);
    model.init_params(7);

    Tensor<double> c5_const(cfg.stage_widths[3], cfg.input_h / 32, cfg.input_w / 32);
    c5_const.data.setConstant(0.25);
    ForwardTrace<double> tr;
    model.forward_ppm(c5_const, tr);
    CHECK(tr.ppm_out.h == c5_const.h);
    CHECK(tr.ppm_out.w == c5_const.w);
    // every channel of the fused PPM output is spatially constant
    for (int ch = 0; ch < tr.ppm_out.c; ++ch) {
        auto plane = tr.ppm_out.channel(ch);
        CHECK((plane - plane(0, 0)).abs().maxCoeff() <= 1e-12);
    }

    // 1x1 bin equals the global mean of the top stage
    Rng rng(8);
    ForwardTrace<double> tr2;
    model.forward_features(random_image<double>(rng, cfg.input_h, cfg.input_w), tr2);
    const auto& c5 = tr2.keep_act[3];
    REQUIRE(cfg.ppm_bins[0] == 1);
    for (int ch = 0; ch < c5.c; ++ch)
        CHECK(tr2.ppm_pool[0].at(ch, 0, 0) ==
              doctest::Approx(c5.channel(ch).mean()).epsilon(1e-12));
}

TEST_CASE("head: constant P3 field gives identical offsets for any anchor") {
    ModelConfig cfg = toy_config();
    DalnetModel<double> model(cfg);
    model.init_params(9);
    ForwardTrace<double> tr;
    tr.p3 = Tensor<double>(cfg.fpn_channels, cfg.input_h / 8, cfg.input_w / 8);
    tr.p3.data.setConstant(0.6);

    // both rays stay strictly inside the P3 node range (no zero padding)
    AnchorLine a{30.0, 56.0, M_PI / 2, 1.0};
    AnchorLine b{70.0, 56.0, 1.35, 1.0};
    auto pa = model.forward_head(a, tr);
    auto pb = model.forward_head(b, tr);
    CHECK((pa.delta_x - pb.delta_x).abs().maxCoeff() <= 1e-12);
    CHECK(pa.s_norm == doctest::Approx(pb.s_norm).epsilon(1e-12));
}

TEST_CASE("train_step: loss parts finite on random init") {
    ModelConfig cfg = toy_config();
    DalnetModel<double> model(cfg);
    model.init_params(10);
    Rng rng(11);
    auto batch = make_toy_batch(cfg, rng);
    auto grads = model.make_grad_buffer();
    DalnetModel<double>::TrainOptions opt;
    auto parts = model.train_step(batch.image, batch.targets, batch.rails, opt, grads);
    for (double v : {parts.heat, parts.offset, parts.slope, parts.sl, parts.liou})
        CHECK(std::isfinite(v));
    CHECK(parts.heat > 0.0);
}

TEST_CASE("train_step: every parameter receives gradient") {
    ModelConfig cfg = toy_config();
    DalnetModel<double> model(cfg);
    model.init_params(12);
    Rng rng(13);
    auto batch = make_toy_batch(cfg, rng);
    auto grads = model.make_grad_buffer();
    DalnetModel<double>::TrainOptions opt;
    model.train_step(batch.image, batch.targets, batch.rails, opt, grads);
    for (const auto& ref : collect_params(grads)) {
        double max_abs = 0.0;
        for (std::ptrdiff_t i = 0; i < ref.size; ++i)
            max_abs = std::max(max_abs, std::abs(ref.data[i]));
        INFO("parameter ", ref.name);
        CHECK(max_abs > 0.0);
    }
}

TEST_CASE("train_step: no rails leaves head losses at zero") {
    ModelConfig cfg = toy_config();
    DalnetModel<double> model(cfg);
    model.init_params(14);
    Rng rng(15);
    auto img = random_image<double>(rng, cfg.input_h, cfg.input_w);
    auto targets = encode_targets<double>({}, cfg.grid(), ModelConfig::kStrideP4, 2.0, 1);
    auto grads = model.make_grad_buffer();
    DalnetModel<double>::TrainOptions opt;
    auto parts = model.train_step(img, targets, {}, opt, grads);
    CHECK(parts.sl == 0.0);
    CHECK(parts.liou == 0.0);
    CHECK(parts.offset == 0.0);
    CHECK(parts.heat > 0.0);
}

TEST_CASE("train_step: head losses do not depend on generator parameters") {
    ModelConfig cfg = toy_config();
    DalnetModel<double> model(cfg);
    model.init_params(16);
    Rng rng(17);
    auto batch = make_toy_batch(cfg, rng);
    DalnetModel<double>::TrainOptions opt;

    auto grads = model.make_grad_buffer();
    auto before = model.train_step(batch.image, batch.targets, batch.rails, opt, grads);

    // scramble all six generator convs
    Rng scramble(18);
    for (ConvP<double>* c : {&model.params().heat_conv, &model.params().heat_out,
                             &model.params().offset_conv, &model.params().offset_out,
                             &model.params().slope_conv, &model.params().slope_out})
        for (Eigen::Index i = 0; i < c->w.size(); ++i)
            c->w.data()[i] = scramble.normal(0.0, 0.3);

    auto grads2 = model.make_grad_buffer();
    auto after = model.train_step(batch.image, batch.targets, batch.rails, opt, grads2);
    CHECK(after.sl == before.sl);
    CHECK(after.liou == before.liou);
    CHECK(after.heat != before.heat);
}

TEST_CASE("train_step: analytic gradients match finite differences") {
    ModelConfig cfg = toy_config();
    DalnetModel<double> model(cfg);
    model.init_params(19);
    Rng rng(20);
    auto batch = make_toy_batch(cfg, rng);
    DalnetModel<double>::TrainOptions opt;

    auto grads = model.make_grad_buffer();
    auto parts = model.train_step(batch.image, batch.targets, batch.rails, opt, grads);
    (void)parts;

    auto eval = [&] {
        auto scratch = model.make_grad_buffer();
        auto p = model.train_step(batch.image, batch.targets, batch.rails, opt, scratch);
        return total_loss(p, opt.weights);
    };

    auto param_refs = collect_params(model.params());
    auto grad_refs = collect_params(grads);
    REQUIRE(param_refs.size() == grad_refs.size());
    Rng pick(21);
    int checked = 0;
    for (std::size_t t = 0; t < param_refs.size(); ++t) {
        for (int probe = 0; probe < 2; ++probe) {
            std::ptrdiff_t i = static_cast<std::ptrdiff_t>(pick.next_u64() % param_refs[t].size);
            double* slot = param_refs[t].data + i;
            double analytic = grad_refs[t].data[i];
            double fd = central_diff([&](double v) { *slot = v; }, eval, *slot, 1e-4);
            // a step-size-sensitive difference means the probe window straddles
            // a relu/L1 kink; such probes are not checkable by differences
            double fd_small = central_diff([&](double v) { *slot = v; }, eval, *slot, 1e-5);
            if (rel_err(fd, fd_small) > 1e-4) continue;
            if (std::abs(fd) < 1e-9 && std::abs(analytic) < 1e-9) continue;
            INFO("param ", param_refs[t].name, " idx ", i);
            CHECK(rel_err(analytic, fd) <= 1e-3);
            ++checked;
        }
    }
    CHECK(checked > 20);
}

TEST_CASE("infer: prior-initialized heatmap yields no detections") {
    ModelConfig cfg = toy_config();
    DalnetModel<double> model(cfg);

    // zero weights: heatmap = sigmoid(bias) ~ 0.1 < 0.3 everywhere
    model.params().heat_out.b[0] = cfg.heatmap_bias_init;
    Rng rng(22);
    auto img = random_image<double>(rng, cfg.input_h, cfg.input_w);
    auto proposals = model.infer(img, 4, 0.3);
    CHECK(proposals.empty());
}

TEST_CASE("infer: k_max bounds detections, scores non-increasing, cells distinct") {
    ModelConfig cfg = toy_config();
    DalnetModel<double> model(cfg);
    model.init_params(23);
    Rng rng(24);
    auto img = random_image<double>(rng, cfg.input_h, cfg.input_w);
    for (int k_max : {1, 2, 5}) {
        auto proposals = model.infer(img, k_max, 0.02);
        CHECK(static_cast<int>(proposals.size()) <= k_max);
        std::vector<std::pair<int, int>> cells;
        for (std::size_t i = 0; i < proposals.size(); ++i) {
            if (i > 0) CHECK(proposals[i].score <= proposals[i - 1].score);
            int cx = cell_index(proposals[i].anchor.x_start, ModelConfig::kStrideP4,
                                cfg.w4());
            int cy = cell_index(proposals[i].anchor.y_start, ModelConfig::kStrideP4,
                                cfg.h4());
            for (auto [px, py] : cells) CHECK((px != cx || py != cy));
            cells.emplace_back(cx, cy);
        }
    }
}

TEST_CASE("determinism: init and gradients are bit-identical across runs") {
    ModelConfig cfg = toy_config();
    DalnetModel<double> a(cfg), b(cfg);
    a.init_params(42);
    b.init_params(42);
    auto ra = collect_params(a.params());
    auto rb = collect_params(b.params());
    REQUIRE(ra.size() == rb.size());
    for (std::size_t t = 0; t < ra.size(); ++t)
        for (std::ptrdiff_t i = 0; i < ra[t].size; ++i) REQUIRE(ra[t].data[i] == rb[t].data[i]);

    Rng rng(43);
    auto batch = make_toy_batch(cfg, rng);
    DalnetModel<double>::TrainOptions opt;
    auto g1 = a.make_grad_buffer();
    auto g2 = a.make_grad_buffer();
    a.train_step(batch.image, batch.targets, batch.rails, opt, g1);
    a.train_step(batch.image, batch.targets, batch.rails, opt, g2);
    auto r1 = collect_params(g1);
    auto r2 = collect_params(g2);
    for (std::size_t t = 0; t < r1.size(); ++t)
        for (std::ptrdiff_t i = 0; i < r1[t].size; ++i) REQUIRE(r1[t].data[i] == r2[t].data[i]);
}
