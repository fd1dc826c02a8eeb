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
#include <stdexcept>
#include <string>
#include <vector>

#include "dal/geometry.hpp"
#include "dal/label_codec.hpp"
#include "dal/losses.hpp"
#include "dal/nn/ops.hpp"
#include "dal/rng.hpp"
#include "dal/tensor.hpp"

namespace dal::nn {

/// Detection model: toy multi-scale backbone, pyramid pooling on the top
/// stage, FPN neck (P3..P5, C channels), a three-branch anchor line
/// generator on P4 (stride 16) and an anchor-referenced head on P3
/// (stride 8).
struct ModelConfig {
    int input_h = 320;
    int input_w = 800;
    std::array<int, 4> stage_widths{16, 32, 64, 64};
    int fpn_channels = 64;      // C
    int n_sample_points = 36;   // N_s
    int n_rows = 72;            // N_pts
    std::vector<int> ppm_bins{1, 2, 3, 6};
    int generator_hidden = 64;
    double leaky_slope = 0.1;
    double heatmap_bias_init = -2.19;  // sigmoid prior ~0.1
    double heatmap_clamp = 1e-6;

    static constexpr int kStrideP3 = 8;
    static constexpr int kStrideP4 = 16;

    void validate() const {
        if (input_h <= 0 || input_w <= 0 || input_h % 32 != 0 || input_w % 32 != 0)
            throw std::invalid_argument("model input size must be positive and divisible by 32");
        if (n_rows < 2) throw std::invalid_argument("n_rows must be >= 2");
        if (n_sample_points < 2) throw std::invalid_argument("n_sample_points must be >= 2");
        if (ppm_bins.empty()) throw std::invalid_argument("ppm_bins must be nonempty");
        for (std::size_t i = 1; i < ppm_bins.size(); ++i)
            if (ppm_bins[i] <= ppm_bins[i - 1])
                throw std::invalid_argument("ppm_bins must be ascending");
        for (int w : stage_widths)
            if (w <= 0) throw std::invalid_argument("stage widths must be positive");
        if (fpn_channels <= 0 || generator_hidden <= 0)
            throw std::invalid_argument("channel counts must be positive");
    }

    ImageGrid grid() const { return {input_w, input_h, n_rows}; }
    int h4() const { return input_h / kStrideP4; }
    int w4() const { return input_w / kStrideP4; }
    int roi_features() const { return n_sample_points * fpn_channels; }
    int head_outputs() const { return n_rows + 2; }
};

template <typename T>
struct ConvP {
    MatX<T> w;  // out_c x (in_c * k * k)
    VecX<T> b;
    int in_c = 0, out_c = 0, k = 1, stride = 1, pad = 0;
};

template <typename T>
ConvP<T> make_conv(int in_c, int out_c, int k, int stride, int pad) {
    ConvP<T> c;
    c.in_c = in_c;
    c.out_c = out_c;
    c.k = k;
    c.stride = stride;
    c.pad = pad;
    c.w = MatX<T>::Zero(out_c, std::ptrdiff_t(in_c) * k * k);
    c.b = VecX<T>::Zero(out_c);
    return c;
}

/// All trainable parameters; visit() enumerates them in a fixed order so
/// optimizers, checkpoints and buffers stay aligned.
template <typename T>
struct DalnetParams {
    ConvP<T> stem;
    std::array<ConvP<T>, 4> stage_down;  // stride-2 conv per stage
    std::array<ConvP<T>, 4> stage_keep;  // stride-1 conv per stage
    std::vector<ConvP<T>> ppm_reduce;    // per bin
    ConvP<T> ppm_fuse;
    ConvP<T> lat_p3, lat_p4, lat_p5;
    ConvP<T> smooth_p3, smooth_p4, smooth_p5;
    ConvP<T> heat_conv, heat_out;
    ConvP<T> offset_conv, offset_out;
    ConvP<T> slope_conv, slope_out;
    MatX<T> head_w;
    VecX<T> head_b;

    template <typename F>
    void visit(F&& f) {
        auto conv = [&](const std::string& name, ConvP<T>& c) {
            f(name + ".w", c.w.data(), c.w.size());
            f(name + ".b", c.b.data(), c.b.size());
        };
        conv("stem", stem);
        for (int i = 0; i < 4; ++i) {
            conv("stage" + std::to_string(i) + ".down", stage_down[i]);
            conv("stage" + std::to_string(i) + ".keep", stage_keep[i]);
        }
        for (std::size_t i = 0; i < ppm_reduce.size(); ++i)
            conv("ppm.reduce" + std::to_string(i), ppm_reduce[i]);
        conv("ppm.fuse", ppm_fuse);
        conv("fpn.lat_p3", lat_p3);
        conv("fpn.lat_p4", lat_p4);
        conv("fpn.lat_p5", lat_p5);
        conv("fpn.smooth_p3", smooth_p3);
        conv("fpn.smooth_p4", smooth_p4);
        conv("fpn.smooth_p5", smooth_p5);
        conv("gen.heat_conv", heat_conv);
        conv("gen.heat_out", heat_out);
        conv("gen.offset_conv", offset_conv);
        conv("gen.offset_out", offset_out);
        conv("gen.slope_conv", slope_conv);
        conv("gen.slope_out", slope_out);
        f("head.w", head_w.data(), head_w.size());
        f("head.b", head_b.data(), head_b.size());
    }
};

template <typename T>
struct ParamRef {
    std::string name;
    T* data;
    std::ptrdiff_t size;
};

template <typename T>
std::vector<ParamRef<T>> collect_params(DalnetParams<T>& p) {
    std::vector<ParamRef<T>> refs;
    p.visit([&](const std::string& name, T* data, std::ptrdiff_t size) {
        refs.push_back({name, data, size});
    });
    return refs;
}

/// Per-image activations kept alive for the backward pass.
template <typename T>
struct ForwardTrace {
    Tensor<T> input;
    Tensor<T> stem_pre, stem_act;
    std::array<Tensor<T>, 4> down_pre, down_act, keep_pre, keep_act;
    std::vector<Tensor<T>> ppm_pool, ppm_red_pre, ppm_red_act, ppm_up;
    Tensor<T> ppm_cat, ppm_fuse_pre, ppm_out;
    Tensor<T> lat3, lat4, lat5;
    Tensor<T> p5, sum4, p4, sum3, p3;
    Tensor<T> heat_pre, heat_act, heat_logits, heat_sig, heat_prob;
    Tensor<T> off_pre, off_act, off_map;
    Tensor<T> slope_pre, slope_act, slope_logits, slope_sig, slope_map;
    // head, one entry per anchor
    std::vector<std::vector<std::pair<double, double>>> roi_pts;  // P3 grid coords
    std::vector<bool> roi_inside;                                 // any sample on the image
    std::vector<MatX<T>> roi_feat;                                // C x N_s
    std::vector<VecX<T>> head_out;                                // n_rows + 2
};

template <typename T>
struct HeadPrediction {
    Eigen::Array<T, Eigen::Dynamic, 1> delta_x;  // n_rows, px
    T s_norm = 0;
    T l_norm = 0;
    bool inside = true;
};

template <typename T>
MapArr<T> channel_to_map(const Tensor<T>& t, int ch) {
    MapArr<T> m(t.h, t.w);
    for (int j = 0; j < t.h; ++j)
        for (int i = 0; i < t.w; ++i) m(j, i) = t.at(ch, j, i);
    return m;
}

template <typename T>
void add_map_to_channel(const MapArr<T>& m, T scale, Tensor<T>& t, int ch) {
    for (int j = 0; j < t.h; ++j)
        for (int i = 0; i < t.w; ++i) t.at(ch, j, i) += scale * m(j, i);
}

template <typename T>
class DalnetModel {
public:
    explicit DalnetModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build();
    }

    const ModelConfig& config() const { return cfg_; }
    DalnetParams<T>& params() { return p_; }
    const DalnetParams<T>& params() const { return p_; }

    /// Zeroed buffer with the same layout as the parameters.
    DalnetParams<T> make_grad_buffer() const {
        DalnetParams<T> g = p_;
        g.visit([](const std::string&, T* data, std::ptrdiff_t size) {
            std::fill(data, data + size, T(0));
        });
        return g;
    }

    void init_params(std::uint64_t seed) {
        Rng rng(seed);
        auto init_conv = [&](ConvP<T>& c, bool output_layer) {
            const double fan_in = double(c.in_c) * c.k * c.k;
            const double std = output_layer ? std::sqrt(1.0 / fan_in) : std::sqrt(2.0 / fan_in);
            for (Eigen::Index i = 0; i < c.w.size(); ++i)
                c.w.data()[i] = static_cast<T>(rng.normal(0.0, std));
            c.b.setZero();
        };
        init_conv(p_.stem, false);
        for (int i = 0; i < 4; ++i) {
            init_conv(p_.stage_down[i], false);
            init_conv(p_.stage_keep[i], false);
        }
        for (auto& c : p_.ppm_reduce) init_conv(c, false);
        init_conv(p_.ppm_fuse, false);
        init_conv(p_.lat_p3, true);
        init_conv(p_.lat_p4, true);
        init_conv(p_.lat_p5, true);
        init_conv(p_.smooth_p3, true);
        init_conv(p_.smooth_p4, true);
        init_conv(p_.smooth_p5, true);
        init_conv(p_.heat_conv, false);
        init_conv(p_.heat_out, true);
        init_conv(p_.offset_conv, false);
        init_conv(p_.offset_out, true);
        init_conv(p_.slope_conv, false);
        init_conv(p_.slope_out, true);
        p_.heat_out.b[0] = static_cast<T>(cfg_.heatmap_bias_init);
        const double head_std = std::sqrt(1.0 / cfg_.roi_features());
        for (Eigen::Index i = 0; i < p_.head_w.size(); ++i)
            p_.head_w.data()[i] = static_cast<T>(rng.normal(0.0, head_std));
        p_.head_b.setZero();
    }

    // ---- forward -------------------------------------------------------

    void forward_features(const Tensor<T>& image, ForwardTrace<T>& tr) const {
        forward_backbone(image, tr);
        forward_ppm(tr.keep_act[3], tr);
        forward_fpn(tr);
    }

    void forward_backbone(const Tensor<T>& image, ForwardTrace<T>& tr) const {
        if (image.c != 3 || image.h != cfg_.input_h || image.w != cfg_.input_w)
            throw std::invalid_argument("input image does not match the model size");
        const T slope = static_cast<T>(cfg_.leaky_slope);
        tr.input = image;
        tr.stem_pre = apply_conv(p_.stem, image);
        tr.stem_act = leaky_relu(tr.stem_pre, slope);
        const Tensor<T>* prev = &tr.stem_act;
        for (int i = 0; i < 4; ++i) {
            tr.down_pre[i] = apply_conv(p_.stage_down[i], *prev);
            tr.down_act[i] = leaky_relu(tr.down_pre[i], slope);
            tr.keep_pre[i] = apply_conv(p_.stage_keep[i], tr.down_act[i]);
            tr.keep_act[i] = leaky_relu(tr.keep_pre[i], slope);
            prev = &tr.keep_act[i];
        }
    }

    /// Pyramid pooling on the top stage: per-bin adaptive average pooling,
    /// 1x1 reduction, bilinear upsample, concat with the input, 1x1 fusion.
    void forward_ppm(const Tensor<T>& c5, ForwardTrace<T>& tr) const {
        const T slope = static_cast<T>(cfg_.leaky_slope);
        const std::size_t nb = cfg_.ppm_bins.size();
        tr.ppm_pool.resize(nb);
        tr.ppm_red_pre.resize(nb);
        tr.ppm_red_act.resize(nb);
        tr.ppm_up.resize(nb);
        Tensor<T> cat(c5.c + int(nb) * p_.ppm_reduce[0].out_c, c5.h, c5.w);
        cat.data.segment(0, c5.size()) = c5.data;
        std::ptrdiff_t off = c5.size();
        for (std::size_t bi = 0; bi < nb; ++bi) {
            const int b = cfg_.ppm_bins[bi];
            tr.ppm_pool[bi] = adaptive_avg_pool(c5, b, b);
            tr.ppm_red_pre[bi] = apply_conv(p_.ppm_reduce[bi], tr.ppm_pool[bi]);
            tr.ppm_red_act[bi] = leaky_relu(tr.ppm_red_pre[bi], slope);
            tr.ppm_up[bi] = bilinear_resize(tr.ppm_red_act[bi], c5.h, c5.w);
            cat.data.segment(off, tr.ppm_up[bi].size()) = tr.ppm_up[bi].data;
            off += tr.ppm_up[bi].size();
        }
        tr.ppm_cat = std::move(cat);
        tr.ppm_fuse_pre = apply_conv(p_.ppm_fuse, tr.ppm_cat);
        tr.ppm_out = leaky_relu(tr.ppm_fuse_pre, slope);
    }

    /// FPN: laterals, top-down nearest upsample-and-add, 3x3 smoothing.
    /// The smoothed upper level feeds the level below so every pyramid
    /// parameter stays on a supervised path.
    void forward_fpn(ForwardTrace<T>& tr) const {
        tr.lat5 = apply_conv(p_.lat_p5, tr.ppm_out);
        tr.lat4 = apply_conv(p_.lat_p4, tr.keep_act[2]);
        tr.lat3 = apply_conv(p_.lat_p3, tr.keep_act[1]);
        tr.p5 = apply_conv(p_.smooth_p5, tr.lat5);
        Tensor<T> up5 = upsample_nearest2x(tr.p5);
        tr.sum4 = tr.lat4;
        tr.sum4.data += up5.data;
        tr.p4 = apply_conv(p_.smooth_p4, tr.sum4);
        Tensor<T> up4 = upsample_nearest2x(tr.p4);
        tr.sum3 = tr.lat3;
        tr.sum3.data += up4.data;
        tr.p3 = apply_conv(p_.smooth_p3, tr.sum3);
    }

    void forward_generator(ForwardTrace<T>& tr) const {
        const T slope = static_cast<T>(cfg_.leaky_slope);
        const T lo = static_cast<T>(cfg_.heatmap_clamp);
        const T hi = T(1) - lo;

        tr.heat_pre = apply_conv(p_.heat_conv, tr.p4);
        tr.heat_act = leaky_relu(tr.heat_pre, slope);
        tr.heat_logits = apply_conv(p_.heat_out, tr.heat_act);
        tr.heat_sig = sigmoid(tr.heat_logits);
        tr.heat_prob = tr.heat_sig;
        tr.heat_prob.data = tr.heat_prob.data.min(hi).max(lo);

        tr.off_pre = apply_conv(p_.offset_conv, tr.p4);
        tr.off_act = leaky_relu(tr.off_pre, slope);
        tr.off_map = apply_conv(p_.offset_out, tr.off_act);

        tr.slope_pre = apply_conv(p_.slope_conv, tr.p4);
        tr.slope_act = leaky_relu(tr.slope_pre, slope);
        tr.slope_logits = apply_conv(p_.slope_out, tr.slope_act);
        tr.slope_sig = sigmoid(tr.slope_logits);
        tr.slope_map = tr.slope_sig;
        tr.slope_map.data *= static_cast<T>(M_PI);
    }

    /// Sample N_s points on the anchor, gather bilinear P3 features, run the
    /// fully connected head. Appends the per-anchor tensors to the trace.
    HeadPrediction<T> forward_head(const AnchorLine& anchor, ForwardTrace<T>& tr) const {
        const ImageGrid grid = cfg_.grid();
        auto img_pts = sample_anchor_points(anchor, cfg_.n_sample_points, grid);
        bool inside = false;
        std::vector<std::pair<double, double>> feat_pts;
        feat_pts.reserve(img_pts.size());
        for (auto [x, y] : img_pts) {
            if (x >= 0 && x <= grid.width_px && y >= 0 && y <= grid.height_px) inside = true;
            feat_pts.emplace_back(x / ModelConfig::kStrideP3, y / ModelConfig::kStrideP3);
        }
        MatX<T> feat = bilinear_sample_points(tr.p3, feat_pts);
        Eigen::Map<const VecX<T>> flat(feat.data(), feat.size());
        VecX<T> out = linear(VecX<T>(flat), p_.head_w, p_.head_b);

        tr.roi_pts.push_back(std::move(feat_pts));
        tr.roi_inside.push_back(inside);
        tr.roi_feat.push_back(std::move(feat));
        tr.head_out.push_back(out);

        HeadPrediction<T> pred;
        pred.delta_x = out.head(cfg_.n_rows).array();
        pred.s_norm = out[cfg_.n_rows];
        pred.l_norm = out[cfg_.n_rows + 1];
        pred.inside = inside;
        return pred;
    }

    // ---- training ------------------------------------------------------

    struct TrainOptions {
        LossWeights weights;
        bool jitter_anchors = false;
        double jitter_pos_px = 4.0;      // start perturbation, stays inside the valid region
        double jitter_theta_rad = 0.02;  // slope perturbation
    };

    /// One image: forward, all five losses, full backward into `grads`.
    /// Head anchors are teacher-forced from the ground truth (start = exact
    /// bottom point, slope = mean rail angle), one per rail.
    LossParts<T> train_step(const Tensor<T>& image, const TargetMaps<T>& targets,
                            const std::vector<RailAnnotation>& rails, const TrainOptions& opt,
                            DalnetParams<T>& grads, Rng* jitter_rng = nullptr) const {
        const ImageGrid grid = cfg_.grid();
        ForwardTrace<T> tr;
        forward_features(image, tr);
        forward_generator(tr);

        LossParts<T> parts;
        const LossWeights& w = opt.weights;

        // generator losses on the stride-16 maps
        MapArr<T> heat_pred = channel_to_map(tr.heat_prob, 0);
        MapArr<T> dheat;
        parts.heat = focal_heatmap_loss(heat_pred, targets.heatmap, targets.n_rails,
                                        w.alpha, w.beta, &dheat);
        MapArr<T> off_x = channel_to_map(tr.off_map, 0);
        MapArr<T> off_y = channel_to_map(tr.off_map, 1);
        MapArr<T> doff_x, doff_y;
        parts.offset = offset_loss(off_x, off_y, targets, &doff_x, &doff_y);
        MapArr<T> slope_pred = channel_to_map(tr.slope_map, 0);
        MapArr<T> dslope;
        parts.slope = slope_loss(slope_pred, targets, &dslope);

        // teacher-forced head, one proposal per rail
        struct HeadItem {
            Eigen::Array<T, Eigen::Dynamic, 1> liou_grad;
            std::pair<T, T> sl_grad;
            int index = 0;  // into tr.head_out
        };
        std::vector<HeadItem> head_items;
        std::vector<std::pair<T, T>> pred_sl, gt_sl;
        T liou_sum = 0;
        int liou_count = 0;
        for (const auto& rail : rails) {
            auto anchor = anchor_from_rail(rail, grid);
            if (!anchor) continue;
            if (opt.jitter_anchors && jitter_rng) {
                // teach the head to absorb generator error: perturb the anchor
                // within the supervised start region, at the scale the trained
                // generator actually misses by (a few px, ~1 degree)
                anchor->x_start += opt.jitter_pos_px * jitter_rng->uniform(-1.0, 1.0);
                anchor->y_start += opt.jitter_pos_px * jitter_rng->uniform(-1.0, 1.0);
                anchor->theta = clamp_theta(anchor->theta +
                                            opt.jitter_theta_rad * jitter_rng->uniform(-1.0, 1.0));
            }
            HeadPrediction<T> pred = forward_head(*anchor, tr);
            HeadItem item;
            item.index = static_cast<int>(tr.head_out.size()) - 1;

            Eigen::Array<T, Eigen::Dynamic, 1> pred_xs(cfg_.n_rows);
            Eigen::Array<T, Eigen::Dynamic, 1> gt_xs(cfg_.n_rows);
            pred_xs.setZero();
            gt_xs.setZero();
            const int s = rail.start_index;
            const int e = rail.end_index();
            for (int i = s; i <= e; ++i) {
                pred_xs[i] = static_cast<T>(anchor_x_at_row(*anchor, grid.row_y(i))) +
                             pred.delta_x[i];
                gt_xs[i] = static_cast<T>(rail.xs[i]);
            }
            liou_sum += line_iou_loss_single(pred_xs, gt_xs, s, e,
                                             w.liou_radius, &item.liou_grad);
            ++liou_count;

            pred_sl.emplace_back(pred.s_norm, pred.l_norm);
            gt_sl.emplace_back(static_cast<T>(double(s) / cfg_.n_rows),
                               static_cast<T>(double(rail.length) / cfg_.n_rows));
            head_items.push_back(std::move(item));
        }
        std::vector<std::pair<T, T>> dsl;
        parts.sl = range_loss(pred_sl, gt_sl, &dsl);
        parts.liou = liou_count > 0 ? liou_sum / T(liou_count) : T(0);

        // ---- backward ----
        Tensor<T> dp3(tr.p3.c, tr.p3.h, tr.p3.w);
        Tensor<T> dp4(tr.p4.c, tr.p4.h, tr.p4.w);

        for (std::size_t k = 0; k < head_items.size(); ++k) {
            const auto& item = head_items[k];
            VecX<T> dout = VecX<T>::Zero(cfg_.head_outputs());
            if (liou_count > 0)
                dout.head(cfg_.n_rows) = static_cast<T>(w.liou) / T(liou_count) *
                                         head_items[k].liou_grad.matrix();
            dout[cfg_.n_rows] = static_cast<T>(w.sl) * dsl[k].first;
            dout[cfg_.n_rows + 1] = static_cast<T>(w.sl) * dsl[k].second;

            const MatX<T>& feat = tr.roi_feat[item.index];
            Eigen::Map<const VecX<T>> flat(feat.data(), feat.size());
            VecX<T> dfeat_flat = VecX<T>::Zero(feat.size());
            linear_backward(VecX<T>(flat), p_.head_w, dout, grads.head_w, grads.head_b,
                            &dfeat_flat);
            MatX<T> dfeat = Eigen::Map<MatX<T>>(dfeat_flat.data(), feat.rows(), feat.cols());
            bilinear_sample_points_backward(tr.p3, tr.roi_pts[item.index], dfeat, dp3);
        }

        backward_generator(tr, dheat, doff_x, doff_y, dslope, w, grads, dp4);
        backward_neck_and_backbone(tr, dp3, dp4, grads);
        return parts;
    }

    // ---- inference -----------------------------------------------------

    std::vector<RailProposal> infer(const Tensor<T>& image, int k_max,
                                    double threshold) const {
        ForwardTrace<T> tr;
        forward_features(image, tr);
        forward_generator(tr);
        return decode_from_trace(tr, k_max, threshold);
    }

    std::vector<RailProposal> decode_from_trace(ForwardTrace<T>& tr, int k_max,
                                                double threshold) const {
        MapArr<T> heat = channel_to_map(tr.heat_prob, 0);
        MapArr<T> off_x = channel_to_map(tr.off_map, 0);
        MapArr<T> off_y = channel_to_map(tr.off_map, 1);
        MapArr<T> slope = channel_to_map(tr.slope_map, 0);
        auto peaks = extract_peaks(heat, k_max, threshold);

        std::vector<RailProposal> proposals;
        for (const auto& peak : peaks) {
            auto anchor = build_anchor(peak, off_x, off_y, slope, ModelConfig::kStrideP4);
            if (!anchor) continue;
            HeadPrediction<T> pred = forward_head(*anchor, tr);
            RailProposal prop;
            prop.anchor = *anchor;
            prop.score = peak.value;
            prop.delta_x = pred.delta_x.template cast<double>();
            if (!pred.inside) {
                prop.start_index = 0;
                prop.length = 0;  // anchor entirely off the image
            } else {
                int s = static_cast<int>(std::lround(double(pred.s_norm) * cfg_.n_rows));
                s = std::clamp(s, 0, cfg_.n_rows - 2);
                int l = static_cast<int>(std::lround(double(pred.l_norm) * cfg_.n_rows));
                l = std::clamp(l, 2, cfg_.n_rows - s);
                prop.start_index = s;
                prop.length = l;
            }
            proposals.push_back(std::move(prop));
        }
        return proposals;
    }

private:
    ModelConfig cfg_;
    DalnetParams<T> p_;

    void build() {
        const auto& sw = cfg_.stage_widths;
        p_.stem = make_conv<T>(3, sw[0], 3, 2, 1);
        int prev = sw[0];
        for (int i = 0; i < 4; ++i) {
            p_.stage_down[i] = make_conv<T>(prev, sw[i], 3, 2, 1);
            p_.stage_keep[i] = make_conv<T>(sw[i], sw[i], 3, 1, 1);
            prev = sw[i];
        }
        const int c5 = sw[3];
        const int red = std::max(1, c5 / 4);
        p_.ppm_reduce.clear();
        for (std::size_t i = 0; i < cfg_.ppm_bins.size(); ++i)
            p_.ppm_reduce.push_back(make_conv<T>(c5, red, 1, 1, 0));
        // 1x1 fusion keeps a constant feature map constant end to end
        p_.ppm_fuse = make_conv<T>(c5 + red * int(cfg_.ppm_bins.size()), c5, 1, 1, 0);

        const int C = cfg_.fpn_channels;
        p_.lat_p3 = make_conv<T>(sw[1], C, 1, 1, 0);
        p_.lat_p4 = make_conv<T>(sw[2], C, 1, 1, 0);
        p_.lat_p5 = make_conv<T>(c5, C, 1, 1, 0);
        p_.smooth_p3 = make_conv<T>(C, C, 3, 1, 1);
        p_.smooth_p4 = make_conv<T>(C, C, 3, 1, 1);
        p_.smooth_p5 = make_conv<T>(C, C, 3, 1, 1);

        const int gh = cfg_.generator_hidden;
        p_.heat_conv = make_conv<T>(C, gh, 3, 1, 1);
        p_.heat_out = make_conv<T>(gh, 1, 1, 1, 0);
        p_.offset_conv = make_conv<T>(C, gh, 3, 1, 1);
        p_.offset_out = make_conv<T>(gh, 2, 1, 1, 0);
        p_.slope_conv = make_conv<T>(C, gh, 3, 1, 1);
        p_.slope_out = make_conv<T>(gh, 1, 1, 1, 0);

        p_.head_w = MatX<T>::Zero(cfg_.head_outputs(), cfg_.roi_features());
        p_.head_b = VecX<T>::Zero(cfg_.head_outputs());
    }

    Tensor<T> apply_conv(const ConvP<T>& c, const Tensor<T>& x) const {
        return conv2d(x, c.w, c.b, c.k, c.stride, c.pad);
    }

    void conv_backward_into(const ConvP<T>& c, const Tensor<T>& x, const Tensor<T>& dy,
                            ConvP<T>& g, Tensor<T>* dx) const {
        conv2d_backward(x, c.w, c.k, c.stride, c.pad, dy, g.w, g.b, dx);
    }

    /// Generator branches backward; accumulates into dp4.
    void backward_generator(const ForwardTrace<T>& tr, const MapArr<T>& dheat,
                            const MapArr<T>& doff_x, const MapArr<T>& doff_y,
                            const MapArr<T>& dslope, const LossWeights& w,
                            DalnetParams<T>& grads, Tensor<T>& dp4) const {
        const T slope = static_cast<T>(cfg_.leaky_slope);
        const T lo = static_cast<T>(cfg_.heatmap_clamp);
        const T hi = T(1) - lo;

        {  // heatmap branch: conv -> leaky -> conv -> sigmoid -> clamp
            Tensor<T> dprob(1, tr.heat_prob.h, tr.heat_prob.w);
            add_map_to_channel(dheat, static_cast<T>(w.heat), dprob, 0);
            // clamp gate
            dprob.data = ((tr.heat_sig.data > lo) && (tr.heat_sig.data < hi))
                             .select(dprob.data, Eigen::Array<T, Eigen::Dynamic, 1>::Zero(
                                                     dprob.data.size()));
            Tensor<T> dlogits(1, tr.heat_logits.h, tr.heat_logits.w);
            sigmoid_backward(tr.heat_sig, dprob, dlogits);
            Tensor<T> dact(tr.heat_act.c, tr.heat_act.h, tr.heat_act.w);
            conv_backward_into(p_.heat_out, tr.heat_act, dlogits, grads.heat_out, &dact);
            Tensor<T> dpre(tr.heat_pre.c, tr.heat_pre.h, tr.heat_pre.w);
            leaky_relu_backward(tr.heat_pre, slope, dact, dpre);
            conv_backward_into(p_.heat_conv, tr.p4, dpre, grads.heat_conv, &dp4);
        }
        {  // offset branch: conv -> leaky -> conv (linear out)
            Tensor<T> dmap(2, tr.off_map.h, tr.off_map.w);
            add_map_to_channel(doff_x, static_cast<T>(w.offset), dmap, 0);
            add_map_to_channel(doff_y, static_cast<T>(w.offset), dmap, 1);
            Tensor<T> dact(tr.off_act.c, tr.off_act.h, tr.off_act.w);
            conv_backward_into(p_.offset_out, tr.off_act, dmap, grads.offset_out, &dact);
            Tensor<T> dpre(tr.off_pre.c, tr.off_pre.h, tr.off_pre.w);
            leaky_relu_backward(tr.off_pre, slope, dact, dpre);
            conv_backward_into(p_.offset_conv, tr.p4, dpre, grads.offset_conv, &dp4);
        }
        {  // slope branch: conv -> leaky -> conv -> pi * sigmoid
            Tensor<T> dmap(1, tr.slope_map.h, tr.slope_map.w);
            add_map_to_channel(dslope, static_cast<T>(w.slope), dmap, 0);
            Tensor<T> dsig(1, tr.slope_sig.h, tr.slope_sig.w);
            dsig.data = dmap.data * static_cast<T>(M_PI);
            Tensor<T> dlogits(1, tr.slope_logits.h, tr.slope_logits.w);
            sigmoid_backward(tr.slope_sig, dsig, dlogits);
            Tensor<T> dact(tr.slope_act.c, tr.slope_act.h, tr.slope_act.w);
            conv_backward_into(p_.slope_out, tr.slope_act, dlogits, grads.slope_out, &dact);
            Tensor<T> dpre(tr.slope_pre.c, tr.slope_pre.h, tr.slope_pre.w);
            leaky_relu_backward(tr.slope_pre, slope, dact, dpre);
            conv_backward_into(p_.slope_conv, tr.p4, dpre, grads.slope_conv, &dp4);
        }
    }

    /// FPN, PPM and backbone backward, consuming the accumulated pyramid
    /// gradients.
    void backward_neck_and_backbone(const ForwardTrace<T>& tr, Tensor<T>& dp3, Tensor<T>& dp4,
                                    DalnetParams<T>& grads) const {
        const T slope = static_cast<T>(cfg_.leaky_slope);

        Tensor<T> dsum3(tr.sum3.c, tr.sum3.h, tr.sum3.w);
        conv_backward_into(p_.smooth_p3, tr.sum3, dp3, grads.smooth_p3, &dsum3);
        Tensor<T> dlat3 = dsum3;  // add path splits
        Tensor<T> dup4 = dsum3;
        upsample_nearest2x_backward(dup4, dp4);

        Tensor<T> dsum4(tr.sum4.c, tr.sum4.h, tr.sum4.w);
        conv_backward_into(p_.smooth_p4, tr.sum4, dp4, grads.smooth_p4, &dsum4);
        Tensor<T> dlat4 = dsum4;
        Tensor<T> dp5(tr.p5.c, tr.p5.h, tr.p5.w);
        upsample_nearest2x_backward(dsum4, dp5);

        Tensor<T> dlat5(tr.lat5.c, tr.lat5.h, tr.lat5.w);
        conv_backward_into(p_.smooth_p5, tr.lat5, dp5, grads.smooth_p5, &dlat5);

        Tensor<T> dppm_out(tr.ppm_out.c, tr.ppm_out.h, tr.ppm_out.w);
        conv_backward_into(p_.lat_p5, tr.ppm_out, dlat5, grads.lat_p5, &dppm_out);
        Tensor<T> dc4(tr.keep_act[2].c, tr.keep_act[2].h, tr.keep_act[2].w);
        conv_backward_into(p_.lat_p4, tr.keep_act[2], dlat4, grads.lat_p4, &dc4);
        Tensor<T> dc3(tr.keep_act[1].c, tr.keep_act[1].h, tr.keep_act[1].w);
        conv_backward_into(p_.lat_p3, tr.keep_act[1], dlat3, grads.lat_p3, &dc3);

        // PPM backward into the top backbone stage
        Tensor<T> dc5(tr.keep_act[3].c, tr.keep_act[3].h, tr.keep_act[3].w);
        {
            Tensor<T> dfuse_pre(tr.ppm_fuse_pre.c, tr.ppm_fuse_pre.h, tr.ppm_fuse_pre.w);
            leaky_relu_backward(tr.ppm_fuse_pre, slope, dppm_out, dfuse_pre);
            Tensor<T> dcat(tr.ppm_cat.c, tr.ppm_cat.h, tr.ppm_cat.w);
            conv_backward_into(p_.ppm_fuse, tr.ppm_cat, dfuse_pre, grads.ppm_fuse, &dcat);
            const Tensor<T>& c5 = tr.keep_act[3];
            dc5.data += dcat.data.segment(0, c5.size());
            std::ptrdiff_t off = c5.size();
            for (std::size_t bi = 0; bi < cfg_.ppm_bins.size(); ++bi) {
                const auto& up = tr.ppm_up[bi];
                Tensor<T> dup(up.c, up.h, up.w);
                dup.data = dcat.data.segment(off, up.size());
                off += up.size();
                Tensor<T> dred_act(tr.ppm_red_act[bi].c, tr.ppm_red_act[bi].h,
                                   tr.ppm_red_act[bi].w);
                bilinear_resize_backward(tr.ppm_red_act[bi], c5.h, c5.w, dup, dred_act);
                Tensor<T> dred_pre(tr.ppm_red_pre[bi].c, tr.ppm_red_pre[bi].h,
                                   tr.ppm_red_pre[bi].w);
                leaky_relu_backward(tr.ppm_red_pre[bi], slope, dred_act, dred_pre);
                Tensor<T> dpool(tr.ppm_pool[bi].c, tr.ppm_pool[bi].h, tr.ppm_pool[bi].w);
                conv_backward_into(p_.ppm_reduce[bi], tr.ppm_pool[bi], dred_pre,
                                   grads.ppm_reduce[bi], &dpool);
                adaptive_avg_pool_backward(c5, cfg_.ppm_bins[bi], cfg_.ppm_bins[bi], dpool,
                                           dc5);
            }
        }

        // backbone backward, threading lateral gradients in at each stage
        Tensor<T> dstage = std::move(dc5);
        for (int i = 3; i >= 0; --i) {
            if (i == 2) dstage.data += dc4.data;
            if (i == 1) dstage.data += dc3.data;
            Tensor<T> dkeep_pre(tr.keep_pre[i].c, tr.keep_pre[i].h, tr.keep_pre[i].w);
            leaky_relu_backward(tr.keep_pre[i], slope, dstage, dkeep_pre);
            Tensor<T> ddown_act(tr.down_act[i].c, tr.down_act[i].h, tr.down_act[i].w);
            conv_backward_into(p_.stage_keep[i], tr.down_act[i], dkeep_pre,
                               grads.stage_keep[i], &ddown_act);
            Tensor<T> ddown_pre(tr.down_pre[i].c, tr.down_pre[i].h, tr.down_pre[i].w);
            leaky_relu_backward(tr.down_pre[i], slope, ddown_act, ddown_pre);
            const Tensor<T>& below = (i == 0) ? tr.stem_act : tr.keep_act[i - 1];
            Tensor<T> dbelow(below.c, below.h, below.w);
            conv_backward_into(p_.stage_down[i], below, ddown_pre, grads.stage_down[i],
                               &dbelow);
            dstage = std::move(dbelow);
        }
        Tensor<T> dstem_pre(tr.stem_pre.c, tr.stem_pre.h, tr.stem_pre.w);
        leaky_relu_backward(tr.stem_pre, slope, dstage, dstem_pre);
        conv_backward_into(p_.stem, tr.input, dstem_pre, grads.stem, nullptr);
    }
};

}  // namespace dal::nn
