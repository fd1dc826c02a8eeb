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

#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dal/dataset.hpp"
#include "dal/eval.hpp"
#include "dal/image.hpp"
#include "dal/nn/checkpoint.hpp"
#include "dal/nn/model.hpp"
#include "dal/optim.hpp"
#include "dal/parallel.hpp"
#include "dal/synth.hpp"

namespace dal {

inline void to_json(nlohmann::json& j, const LossWeights& w) {
    j = nlohmann::json{{"heat", w.heat},   {"offset", w.offset},
                       {"slope", w.slope}, {"sl", w.sl},
                       {"liou", w.liou},   {"alpha", w.alpha},
                       {"beta", w.beta},   {"liou_radius", w.liou_radius}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
    w = LossWeights{};
    if (j.contains("heat")) j.at("heat").get_to(w.heat);
    if (j.contains("offset")) j.at("offset").get_to(w.offset);
    if (j.contains("slope")) j.at("slope").get_to(w.slope);
    if (j.contains("sl")) j.at("sl").get_to(w.sl);
    if (j.contains("liou")) j.at("liou").get_to(w.liou);
    if (j.contains("alpha")) j.at("alpha").get_to(w.alpha);
    if (j.contains("beta")) j.at("beta").get_to(w.beta);
    if (j.contains("liou_radius")) j.at("liou_radius").get_to(w.liou_radius);
}

inline void to_json(nlohmann::json& j, const SceneConfig& c) {
    j = nlohmann::json{{"width", c.width},
                       {"height", c.height},
                       {"n_rows", c.n_rows},
                       {"gauge_min", c.gauge_min},
                       {"gauge_max", c.gauge_max},
                       {"curvature_min", c.curvature_min},
                       {"curvature_max", c.curvature_max},
                       {"brightness_min", c.brightness_min},
                       {"brightness_max", c.brightness_max},
                       {"noise_sigma", c.noise_sigma},
                       {"occluders_min", c.occluders_min},
                       {"occluders_max", c.occluders_max},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SceneConfig& c) {
    c = SceneConfig{};
    if (j.contains("width")) j.at("width").get_to(c.width);
    if (j.contains("height")) j.at("height").get_to(c.height);
    if (j.contains("n_rows")) j.at("n_rows").get_to(c.n_rows);
    if (j.contains("gauge_min")) j.at("gauge_min").get_to(c.gauge_min);
    if (j.contains("gauge_max")) j.at("gauge_max").get_to(c.gauge_max);
    if (j.contains("curvature_min")) j.at("curvature_min").get_to(c.curvature_min);
    if (j.contains("curvature_max")) j.at("curvature_max").get_to(c.curvature_max);
    if (j.contains("brightness_min")) j.at("brightness_min").get_to(c.brightness_min);
    if (j.contains("brightness_max")) j.at("brightness_max").get_to(c.brightness_max);
    if (j.contains("noise_sigma")) j.at("noise_sigma").get_to(c.noise_sigma);
    if (j.contains("occluders_min")) j.at("occluders_min").get_to(c.occluders_min);
    if (j.contains("occluders_max")) j.at("occluders_max").get_to(c.occluders_max);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

/// Write n deterministic scenes: images/ PNGs plus a JSON-lines annotation
/// file with paths relative to out_dir.
inline std::string write_synthetic_dataset(const SceneConfig& cfg, int n,
                                           const std::string& out_dir, int num_workers = 0) {
    cfg.validate();
    const std::filesystem::path out(out_dir);
    std::filesystem::create_directories(out / "images");
    std::vector<DatasetRecord> records(n);
    parallel_for(n, resolve_workers(num_workers), [&](int i) {
        auto scene = generate_scene(cfg, i);
        char name[64];
        std::snprintf(name, sizeof(name), "images/%06d.png", i);
        write_png((out / name).string(), scene.image);
        records[i] = record_from_rails(name, scene.rails, cfg.grid());
    });
    const std::string ann_path = (out / "annotations.jsonl").string();
    write_dataset(ann_path, records);
    return ann_path;
}

struct TrainConfig {
    int epochs = 60;
    int batch_size = 8;
    double lr = 1e-4;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    int r = 2;  // offset/slope supervision radius
    double sigma = 2.0;
    int k_max = 2;
    double peak_threshold = 0.3;
    bool augment = true;
    bool jitter_anchors = false;
    double jitter_pos_px = 4.0;
    double jitter_theta_rad = 0.02;
    int num_workers = 0;  // 0 = auto
    std::string dataset;
    std::string image_root;  // defaults to the dataset file's directory
    LossWeights weights;
    nn::ModelConfig model;

    void validate() const {
        if (epochs <= 0 || batch_size <= 0) throw std::invalid_argument("epochs/batch_size must be positive");
        if (lr <= 0) throw std::invalid_argument("lr must be positive");
        if (weight_decay < 0) throw std::invalid_argument("weight_decay must be >= 0");
        if (r < 0 || r > 3) throw std::invalid_argument("r must be in {0,1,2,3}");
        if (sigma <= 0) throw std::invalid_argument("sigma must be positive");
        if (k_max <= 0) throw std::invalid_argument("k_max must be positive");
        if (peak_threshold < 0 || peak_threshold > 1)
            throw std::invalid_argument("peak_threshold must be in [0,1]");
        if (jitter_pos_px < 0 || jitter_theta_rad < 0)
            throw std::invalid_argument("jitter magnitudes must be >= 0");
        model.validate();
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"lr", c.lr},
                       {"weight_decay", c.weight_decay},
                       {"seed", c.seed},
                       {"r", c.r},
                       {"sigma", c.sigma},
                       {"k_max", c.k_max},
                       {"peak_threshold", c.peak_threshold},
                       {"augment", c.augment},
                       {"jitter_anchors", c.jitter_anchors},
                       {"jitter_pos_px", c.jitter_pos_px},
                       {"jitter_theta_rad", c.jitter_theta_rad},
                       {"num_workers", c.num_workers},
                       {"dataset", c.dataset},
                       {"image_root", c.image_root},
                       {"weights", c.weights},
                       {"model", c.model}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
    if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
    if (j.contains("lr")) j.at("lr").get_to(c.lr);
    if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("r")) j.at("r").get_to(c.r);
    if (j.contains("sigma")) j.at("sigma").get_to(c.sigma);
    if (j.contains("k_max")) j.at("k_max").get_to(c.k_max);
    if (j.contains("peak_threshold")) j.at("peak_threshold").get_to(c.peak_threshold);
    if (j.contains("augment")) j.at("augment").get_to(c.augment);
    if (j.contains("jitter_anchors")) j.at("jitter_anchors").get_to(c.jitter_anchors);
    if (j.contains("jitter_pos_px")) j.at("jitter_pos_px").get_to(c.jitter_pos_px);
    if (j.contains("jitter_theta_rad")) j.at("jitter_theta_rad").get_to(c.jitter_theta_rad);
    if (j.contains("num_workers")) j.at("num_workers").get_to(c.num_workers);
    if (j.contains("dataset")) j.at("dataset").get_to(c.dataset);
    if (j.contains("image_root")) j.at("image_root").get_to(c.image_root);
    if (j.contains("weights")) j.at("weights").get_to(c.weights);
    if (j.contains("model")) j.at("model").get_to(c.model);
}

inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read config: " + path);
    nlohmann::json j;
    is >> j;
    return j.get<TrainConfig>();
}

// ---- dataset loading ---------------------------------------------------------

struct TrainSample {
    std::string name;  // raw_file key
    ImageU8 image;     // at model input size
    std::vector<RailAnnotation> rails;
};

/// Read the annotation file plus images, mapping everything to the model
/// input size through the crop/resize preprocess.
inline std::vector<TrainSample> load_training_set(const TrainConfig& cfg) {
    const auto records = read_dataset(cfg.dataset);
    const std::filesystem::path root = cfg.image_root.empty()
                                           ? std::filesystem::path(cfg.dataset).parent_path()
                                           : std::filesystem::path(cfg.image_root);
    std::vector<TrainSample> samples(records.size());
    const ImageGrid grid = cfg.model.grid();
    std::vector<std::string> errors(records.size());
    parallel_for(static_cast<int>(records.size()), resolve_workers(cfg.num_workers), [&](int i) {
        const auto& rec = records[i];
        try {
            ImageU8 img = read_png((root / rec.raw_file).string());
            const Preprocess pre = Preprocess::make(img.width, img.height, cfg.model.input_w,
                                                    cfg.model.input_h);
            samples[i].name = rec.raw_file;
            samples[i].image = pre.apply(img);
            samples[i].rails = rails_from_record(rec, pre, grid);
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    });
    for (const auto& e : errors)
        if (!e.empty()) throw std::runtime_error("loading training set: " + e);
    return samples;
}

// ---- training ------------------------------------------------------------------

struct EpochLog {
    int epoch = 0;
    double lr = 0;
    LossParts<double> parts;
    double total = 0;
};

struct TrainResult {
    std::vector<EpochLog> logs;
    std::string final_checkpoint;
    std::string best_checkpoint;
};

/// Full training loop: shuffle -> augment -> encode targets -> forward ->
/// losses -> backward -> adaptive-moment step with decoupled weight decay
/// and a per-iteration cosine schedule. Bitwise deterministic for a fixed
/// seed at any worker count: per-sample RNG streams are keyed on
/// (seed, epoch, dataset index) and gradients reduce in batch-slot order.
inline TrainResult train(const TrainConfig& cfg, std::vector<TrainSample> dataset,
                         const std::string& out_dir, std::ostream& log = std::cout) {
    cfg.validate();
    if (dataset.empty()) throw std::runtime_error("training set is empty");
    std::filesystem::create_directories(out_dir);

    nn::DalnetModel<float> model(cfg.model);
    model.init_params(cfg.seed);
    AdamW<float> opt({0.9, 0.999, 1e-8, cfg.weight_decay});
    auto param_refs = nn::collect_params(model.params());

    const int n = static_cast<int>(dataset.size());
    const int batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = static_cast<long>(cfg.epochs) * batches_per_epoch;
    const int workers = resolve_workers(cfg.num_workers);
    const ImageGrid grid = cfg.model.grid();

    nn::DalnetModel<float>::TrainOptions train_opt;
    train_opt.weights = cfg.weights;
    train_opt.jitter_anchors = cfg.jitter_anchors;
    train_opt.jitter_pos_px = cfg.jitter_pos_px;
    train_opt.jitter_theta_rad = cfg.jitter_theta_rad;

    std::vector<nn::DalnetParams<float>> slot_grads(cfg.batch_size, model.make_grad_buffer());
    auto total_grads = model.make_grad_buffer();
    auto grad_refs = nn::collect_params(total_grads);

    TrainResult result;
    double best_total = std::numeric_limits<double>::infinity();
    result.final_checkpoint = (std::filesystem::path(out_dir) / "checkpoint_final.dal").string();
    result.best_checkpoint = (std::filesystem::path(out_dir) / "checkpoint_best.dal").string();

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order(n);
        for (int i = 0; i < n; ++i) order[i] = i;
        Rng shuffle_rng = Rng::from_keys(cfg.seed, 0xe90cULL, static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);

        LossParts<double> epoch_parts;
        double epoch_total = 0.0;
        double epoch_lr = cosine_lr(step, total_steps, cfg.lr);
        for (int b = 0; b < batches_per_epoch; ++b) {
            const int begin = b * cfg.batch_size;
            const int count = std::min(cfg.batch_size, n - begin);
            std::vector<LossParts<float>> slot_parts(count);
            std::vector<std::string> slot_errors(count);

            parallel_for(count, workers, [&](int k) {
                try {
                    const int idx = order[begin + k];
                    const TrainSample& sample = dataset[idx];
                    ImageU8 img = sample.image;
                    std::vector<RailAnnotation> rails = sample.rails;
                    Rng sample_rng = Rng::from_keys(cfg.seed ^ 0xa06e57ULL,
                                                    static_cast<std::uint64_t>(epoch),
                                                    static_cast<std::uint64_t>(idx));
                    if (cfg.augment) augment(img, rails, grid, sample_rng);
                    std::vector<int> skipped;
                    auto targets = encode_targets<float>(rails, grid, nn::ModelConfig::kStrideP4,
                                                         cfg.sigma, cfg.r, &skipped);
                    if (!skipped.empty())
                        std::cerr << "warning: " << sample.name << ": " << skipped.size()
                                  << " rail(s) start outside the image, skipped\n";
                    slot_grads[k].visit([](const std::string&, float* d, std::ptrdiff_t s) {
                        std::fill(d, d + s, 0.0f);
                    });
                    Tensor<float> input = image_to_tensor<float>(img);
                    slot_parts[k] = model.train_step(input, targets, rails, train_opt,
                                                     slot_grads[k],
                                                     cfg.jitter_anchors ? &sample_rng : nullptr);
                } catch (const std::exception& e) {
                    slot_errors[k] = e.what();
                }
            });
            for (int k = 0; k < count; ++k) {
                if (!slot_errors[k].empty())
                    throw std::runtime_error("training aborted at epoch " +
                                             std::to_string(epoch) + " batch " +
                                             std::to_string(b) + ": " + slot_errors[k]);
            }

            // deterministic reduction in slot order, mean over the batch
            total_grads.visit([](const std::string&, float* d, std::ptrdiff_t s) {
                std::fill(d, d + s, 0.0f);
            });
            const float inv = 1.0f / static_cast<float>(count);
            for (int k = 0; k < count; ++k) {
                auto dst = nn::collect_params(total_grads);
                auto src = nn::collect_params(slot_grads[k]);
                for (std::size_t t = 0; t < dst.size(); ++t)
                    for (std::ptrdiff_t i = 0; i < dst[t].size; ++i)
                        dst[t].data[i] += src[t].data[i] * inv;
            }

            LossParts<double> batch_parts;
            for (int k = 0; k < count; ++k) {
                batch_parts.heat += slot_parts[k].heat / count;
                batch_parts.offset += slot_parts[k].offset / count;
                batch_parts.slope += slot_parts[k].slope / count;
                batch_parts.sl += slot_parts[k].sl / count;
                batch_parts.liou += slot_parts[k].liou / count;
            }
            const double batch_total = total_loss(batch_parts, cfg.weights);

            const double lr_t = cosine_lr(step, total_steps, cfg.lr);
            opt.step(param_refs, grad_refs, lr_t);
            ++step;

            epoch_parts.heat += batch_parts.heat / batches_per_epoch;
            epoch_parts.offset += batch_parts.offset / batches_per_epoch;
            epoch_parts.slope += batch_parts.slope / batches_per_epoch;
            epoch_parts.sl += batch_parts.sl / batches_per_epoch;
            epoch_parts.liou += batch_parts.liou / batches_per_epoch;
            epoch_total += batch_total / batches_per_epoch;
        }

        EpochLog entry{epoch, epoch_lr, epoch_parts, epoch_total};
        result.logs.push_back(entry);
        log << "epoch " << (epoch + 1) << "/" << cfg.epochs << std::scientific
            << std::setprecision(3) << " lr " << entry.lr << std::fixed << std::setprecision(5)
            << " total " << entry.total << " heat " << epoch_parts.heat << " offset "
            << epoch_parts.offset << " slope " << epoch_parts.slope << " sl " << epoch_parts.sl
            << " liou " << epoch_parts.liou << "\n";

        if (epoch_total < best_total) {
            best_total = epoch_total;
            nn::save_checkpoint(result.best_checkpoint, cfg.model, model.params());
        }
    }
    nn::save_checkpoint(result.final_checkpoint, cfg.model, model.params());
    return result;
}

// ---- inference -----------------------------------------------------------------

/// Run the detector on one original-resolution image; the record carries
/// points mapped back through the inverse preprocess, rows whose decoded x
/// leaves the image marked as not covered.
inline DatasetRecord infer_image(const nn::DalnetModel<float>& model, const ImageU8& original,
                                 const std::string& name, int k_max, double threshold) {
    const nn::ModelConfig& mc = model.config();
    const Preprocess pre =
        Preprocess::make(original.width, original.height, mc.input_w, mc.input_h);
    const ImageGrid grid = mc.grid();
    Tensor<float> input = image_to_tensor<float>(pre.apply(original));
    auto proposals = model.infer(input, k_max, threshold);

    DatasetRecord rec;
    rec.raw_file = name;
    rec.h_samples.resize(grid.n_rows);
    for (int i = 0; i < grid.n_rows; ++i)
        rec.h_samples[i] = pre.to_source(0.0, grid.row_y(i)).second;

    for (const auto& prop : proposals) {
        if (prop.length < 2) continue;
        RailAnnotation rail = decode_proposal(prop, grid);
        std::vector<double> lane(grid.n_rows, kRowNotCovered);
        int covered = 0;
        for (int i = rail.start_index; i <= rail.end_index(); ++i) {
            auto [sx, sy] = pre.to_source(rail.xs[i], grid.row_y(i));
            (void)sy;
            if (sx < 0.0 || sx > original.width) continue;  // off-image rows stay -2
            lane[i] = sx;
            ++covered;
        }
        if (covered < 2) continue;
        rec.lanes.push_back(std::move(lane));
        rec.scores.push_back(prop.score);
    }
    return rec;
}

// ---- evaluation -----------------------------------------------------------------

struct EvalOptions {
    int canvas_w = 800;
    int canvas_h = 320;
    double stroke_width = 30.0;
    bool tusimple = false;
    int num_workers = 0;
};

/// Mask-IoU F1 across two record files keyed by raw_file. Records present
/// on one side only are an error.
inline EvalReport evaluate_records(const std::vector<DatasetRecord>& preds,
                                   const std::vector<DatasetRecord>& gts,
                                   const EvalOptions& opt = {}) {
    std::map<std::string, const DatasetRecord*> pred_map, gt_map;
    for (const auto& r : preds) pred_map[r.raw_file] = &r;
    for (const auto& r : gts) gt_map[r.raw_file] = &r;
    std::vector<std::string> missing;
    for (const auto& [key, _] : gt_map)
        if (!pred_map.count(key)) missing.push_back("prediction missing for " + key);
    for (const auto& [key, _] : pred_map)
        if (!gt_map.count(key)) missing.push_back("ground truth missing for " + key);
    if (!missing.empty()) {
        std::string msg = "record sets do not match:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw std::runtime_error(msg);
    }

    std::vector<const DatasetRecord*> gt_list, pred_list;
    for (const auto& [key, gt] : gt_map) {
        gt_list.push_back(gt);
        pred_list.push_back(pred_map[key]);
    }

    std::vector<ImageMatch> matches(gt_list.size());
    parallel_for(static_cast<int>(gt_list.size()), resolve_workers(opt.num_workers), [&](int i) {
        auto pred_polys = record_polylines(*pred_list[i]);
        auto gt_polys = record_polylines(*gt_list[i]);
        std::vector<Mask> pred_masks, gt_masks;
        for (const auto& poly : pred_polys)
            pred_masks.push_back(rasterize_rail(poly, opt.stroke_width, opt.canvas_w,
                                                opt.canvas_h));
        for (const auto& poly : gt_polys)
            gt_masks.push_back(rasterize_rail(poly, opt.stroke_width, opt.canvas_w,
                                              opt.canvas_h));
        std::vector<std::vector<double>> iou(pred_masks.size(),
                                             std::vector<double>(gt_masks.size(), 0.0));
        for (std::size_t p = 0; p < pred_masks.size(); ++p)
            for (std::size_t g = 0; g < gt_masks.size(); ++g)
                iou[p][g] = mask_iou(pred_masks[p], gt_masks[g]);
        std::vector<double> scores = pred_list[i]->scores;
        if (scores.empty()) scores.assign(pred_masks.size(), 1.0);
        matches[i] = match_instances(iou, scores, static_cast<int>(gt_masks.size()));
    });

    EvalReport report = f1_scores(matches);
    if (opt.tusimple) {
        TusimpleTotals totals;
        for (std::size_t i = 0; i < gt_list.size(); ++i)
            tusimple_accumulate(*pred_list[i], *gt_list[i], totals);
        report.has_tusimple = true;
        report.accuracy = totals.accuracy();
        report.fdr = totals.fdr();
        report.fnr = totals.fnr();
    }
    return report;
}

// ---- visualization ----------------------------------------------------------------

inline constexpr std::array<std::array<std::uint8_t, 3>, 6> kInstancePalette{{
    {{230, 60, 60}},
    {{60, 200, 80}},
    {{70, 110, 240}},
    {{240, 200, 40}},
    {{200, 70, 220}},
    {{60, 210, 210}},
}};

/// Overlay one detection: the anchor ray from its start toward row 0 and
/// the decoded polyline, in the instance color.
inline void draw_detection(ImageU8& img, const AnchorLine& anchor, const RailAnnotation& rail,
                           const ImageGrid& grid, int instance) {
    const auto color = kInstancePalette[instance % kInstancePalette.size()];
    const std::array<std::uint8_t, 3> ray_color{
        static_cast<std::uint8_t>(color[0] / 2), static_cast<std::uint8_t>(color[1] / 2),
        static_cast<std::uint8_t>(color[2] / 2)};
    auto ray = sample_anchor_points(anchor, 64, grid);
    for (std::size_t i = 1; i < ray.size(); ++i)
        draw_segment(img, ray[i - 1].first, ray[i - 1].second, ray[i].first, ray[i].second, 2.0,
                     ray_color);
    draw_disc(img, anchor.x_start, anchor.y_start, 3.5, color);
    for (int i = rail.start_index + 1; i <= rail.end_index(); ++i)
        draw_segment(img, rail.xs[i - 1], grid.row_y(i - 1), rail.xs[i], grid.row_y(i), 3.0,
                     color);
}

}  // namespace dal
