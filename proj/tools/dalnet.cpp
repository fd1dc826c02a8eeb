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

#include <CLI11.hpp>

#include <dal/pipeline.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;

namespace {

struct ImageEntry {
    std::string key;   // raw_file value for output records
    std::string path;  // where to read the pixels
};

// --images accepts either a directory of PNGs or an annotation JSON-lines
// file whose raw_file entries resolve relative to it.
std::vector<ImageEntry> list_images(const std::string& images_arg) {
    std::vector<ImageEntry> entries;
    const fs::path p(images_arg);
    if (fs::is_directory(p)) {
        for (const auto& e : fs::directory_iterator(p))
            if (e.is_regular_file() && e.path().extension() == ".png")
                entries.push_back({e.path().filename().string(), e.path().string()});
        std::sort(entries.begin(), entries.end(),
                  [](const ImageEntry& a, const ImageEntry& b) { return a.key < b.key; });
    } else {
        const fs::path root = p.parent_path();
        for (const auto& rec : dal::read_dataset(images_arg))
            entries.push_back({rec.raw_file, (root / rec.raw_file).string()});
    }
    return entries;
}

int cmd_synth(const std::string& config_path, const std::string& out_dir, int n,
              std::uint64_t seed, bool seed_set, bool force, int num_workers) {
    dal::SceneConfig cfg;
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw std::runtime_error("cannot read config: " + config_path);
        nlohmann::json j;
        is >> j;
        cfg = j.get<dal::SceneConfig>();
    }
    if (seed_set) cfg.seed = seed;
    if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force)
        throw std::runtime_error("output directory is not empty (use --force): " + out_dir);
    const std::string ann = dal::write_synthetic_dataset(cfg, n, out_dir, num_workers);
    std::cout << "wrote " << n << " scenes; annotations at " << ann << "\n";
    return 0;
}

int cmd_train(CLI::App* app, dal::TrainConfig cfg, const std::string& out_dir) {
    cfg.validate();
    if (cfg.dataset.empty()) throw std::runtime_error("no dataset configured (--dataset)");
    auto samples = dal::load_training_set(cfg);
    auto result = dal::train(cfg, std::move(samples), out_dir, std::cout);
    {
        std::ofstream os(fs::path(out_dir) / "train_config.json");
        os << nlohmann::json(cfg).dump(2) << "\n";
    }
    (void)app;
    std::cout << "final checkpoint: " << result.final_checkpoint << "\n";
    std::cout << "best checkpoint:  " << result.best_checkpoint << "\n";
    return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& images_arg,
              const std::string& out_path, int k_max, double threshold) {
    dal::nn::ModelConfig mc = dal::nn::peek_checkpoint_config(checkpoint);
    dal::nn::DalnetModel<float> model(mc);
    dal::nn::load_checkpoint(checkpoint, model);

    auto entries = list_images(images_arg);
    std::vector<dal::DatasetRecord> records;
    int failures = 0;
    for (const auto& entry : entries) {
        try {
            dal::ImageU8 img = dal::read_png(entry.path);
            records.push_back(dal::infer_image(model, img, entry.key, k_max, threshold));
        } catch (const std::exception& e) {
            std::cerr << "warning: skipping " << entry.path << ": " << e.what() << "\n";
            ++failures;
        }
    }
    dal::write_dataset(out_path, records);
    std::cout << "wrote " << records.size() << " records to " << out_path << "\n";
    return failures == 0 ? 0 : 1;
}

int cmd_eval(const std::string& pred_path, const std::string& gt_path, int width, int height,
             double iou_width, bool tusimple, const std::string& out_path) {
    auto preds = dal::read_dataset(pred_path);
    auto gts = dal::read_dataset(gt_path);
    dal::EvalOptions opt;
    opt.canvas_w = width;
    opt.canvas_h = height;
    opt.stroke_width = iou_width;
    opt.tusimple = tusimple;
    auto report = dal::evaluate_records(preds, gts, opt);
    dal::print_report(std::cout, report);
    if (!out_path.empty()) {
        std::ofstream os(out_path);
        if (!os) throw std::runtime_error("cannot write report: " + out_path);
        os << nlohmann::json(report).dump(2) << "\n";
    }
    return 0;
}

int cmd_viz(const std::string& checkpoint, const std::string& pred_path,
            const std::string& images_arg, const std::string& out_dir, int k_max,
            double threshold) {
    fs::create_directories(out_dir);
    auto entries = list_images(images_arg);

    std::map<std::string, dal::DatasetRecord> pred_map;
    if (!pred_path.empty())
        for (auto& rec : dal::read_dataset(pred_path)) pred_map[rec.raw_file] = rec;

    std::optional<dal::nn::DalnetModel<float>> model;
    if (!checkpoint.empty()) {
        model.emplace(dal::nn::peek_checkpoint_config(checkpoint));
        dal::nn::load_checkpoint(checkpoint, *model);
    }

    for (const auto& entry : entries) {
        dal::ImageU8 img = dal::read_png(entry.path);
        if (model) {
            const auto& mc = model->config();
            const dal::Preprocess pre =
                dal::Preprocess::make(img.width, img.height, mc.input_w, mc.input_h);
            dal::ImageU8 canvas = pre.apply(img);
            const dal::ImageGrid grid = mc.grid();
            auto proposals =
                model->infer(dal::image_to_tensor<float>(canvas), k_max, threshold);
            int instance = 0;
            for (const auto& prop : proposals) {
                if (prop.length < 2) continue;
                dal::draw_detection(canvas, prop.anchor, dal::decode_proposal(prop, grid),
                                    grid, instance++);
            }
            img = canvas;
        } else {
            auto it = pred_map.find(entry.key);
            if (it != pred_map.end()) {
                auto polys = dal::record_polylines(it->second);
                for (std::size_t k = 0; k < polys.size(); ++k) {
                    const auto color = dal::kInstancePalette[k % dal::kInstancePalette.size()];
                    for (std::size_t i = 1; i < polys[k].size(); ++i)
                        dal::draw_segment(img, polys[k][i - 1].first, polys[k][i - 1].second,
                                          polys[k][i].first, polys[k][i].second, 3.0, color);
                }
            }
        }
        dal::write_png((fs::path(out_dir) / fs::path(entry.key).filename()).string(), img);
    }
    std::cout << "wrote " << entries.size() << " overlays to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rail detection with dynamically generated anchor lines"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic rail-scene dataset");
    std::string synth_config, synth_out;
    int synth_n = 16;
    std::uint64_t synth_seed = 0;
    bool synth_force = false;
    int synth_workers = 0;
    synth->add_option("--config", synth_config, "scene config JSON");
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--n", synth_n, "number of scenes");
    auto* synth_seed_opt = synth->add_option("--seed", synth_seed, "scene seed");
    synth->add_flag("--force", synth_force, "allow writing into a non-empty directory");
    synth->add_option("--num_workers", synth_workers, "parallel workers (0 = auto)");

    // train
    auto* train = app.add_subcommand("train", "train a detector");
    std::string train_config, train_out = "runs/default";
    dal::TrainConfig tcfg;
    auto* opt_epochs = train->add_option("--epochs", tcfg.epochs);
    auto* opt_batch = train->add_option("--batch_size", tcfg.batch_size);
    auto* opt_lr = train->add_option("--lr", tcfg.lr);
    auto* opt_wd = train->add_option("--weight_decay", tcfg.weight_decay);
    auto* opt_seed = train->add_option("--seed", tcfg.seed);
    auto* opt_r = train->add_option("--r", tcfg.r)->check(CLI::Range(0, 3));
    auto* opt_sigma = train->add_option("--sigma", tcfg.sigma);
    auto* opt_kmax = train->add_option("--k_max", tcfg.k_max);
    auto* opt_thr = train->add_option("--peak_threshold", tcfg.peak_threshold);
    auto* opt_aug = train->add_flag("--augment,!--no-augment", tcfg.augment);
    auto* opt_jit = train->add_flag("--jitter_anchors,!--no-jitter_anchors", tcfg.jitter_anchors);
    auto* opt_jpos = train->add_option("--jitter_pos_px", tcfg.jitter_pos_px);
    auto* opt_jth = train->add_option("--jitter_theta_rad", tcfg.jitter_theta_rad);
    auto* opt_workers = train->add_option("--num_workers", tcfg.num_workers);
    auto* opt_dataset = train->add_option("--dataset", tcfg.dataset);
    auto* opt_root = train->add_option("--image_root", tcfg.image_root);
    train->add_option("--config", train_config, "training config JSON");
    train->add_option("--out", train_out, "output directory for checkpoints");

    // infer
    auto* infer = app.add_subcommand("infer", "run detection and write predictions");
    std::string infer_ckpt, infer_images, infer_out;
    int infer_kmax = 2;
    double infer_thr = 0.3;
    infer->add_option("--checkpoint", infer_ckpt)->required();
    infer->add_option("--images", infer_images, "PNG directory or JSON-lines file")->required();
    infer->add_option("--out", infer_out, "output prediction JSON-lines")->required();
    infer->add_option("--k_max", infer_kmax);
    infer->add_option("--peak_threshold", infer_thr);

    // eval
    auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
    std::string eval_pred, eval_gt, eval_out;
    int eval_w = 800, eval_h = 320;
    double eval_iou_width = 30.0;
    bool eval_tusimple = false;
    eval->add_option("--pred", eval_pred)->required();
    eval->add_option("--gt", eval_gt)->required();
    eval->add_option("--width", eval_w, "canvas width at the original resolution");
    eval->add_option("--height", eval_h, "canvas height at the original resolution");
    eval->add_option("--iou_width", eval_iou_width, "rasterization stroke width");
    eval->add_flag("--tusimple", eval_tusimple, "also report point metrics");
    eval->add_option("--out", eval_out, "write the report as JSON");

    // viz
    auto* viz = app.add_subcommand("viz", "draw anchors and rails onto image copies");
    std::string viz_ckpt, viz_pred, viz_images, viz_out;
    int viz_kmax = 2;
    double viz_thr = 0.3;
    viz->add_option("--checkpoint", viz_ckpt, "detect with this model");
    viz->add_option("--pred", viz_pred, "or draw an existing prediction file");
    viz->add_option("--images", viz_images)->required();
    viz->add_option("--out", viz_out)->required();
    viz->add_option("--k_max", viz_kmax);
    viz->add_option("--peak_threshold", viz_thr);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed())
            return cmd_synth(synth_config, synth_out, synth_n, synth_seed,
                             synth_seed_opt->count() > 0, synth_force, synth_workers);
        if (train->parsed()) {
            dal::TrainConfig cfg;
            if (!train_config.empty()) cfg = dal::load_train_config(train_config);
            // flags override file values only when given on the command line
            if (opt_epochs->count()) cfg.epochs = tcfg.epochs;
            if (opt_batch->count()) cfg.batch_size = tcfg.batch_size;
            if (opt_lr->count()) cfg.lr = tcfg.lr;
            if (opt_wd->count()) cfg.weight_decay = tcfg.weight_decay;
            if (opt_seed->count()) cfg.seed = tcfg.seed;
            if (opt_r->count()) cfg.r = tcfg.r;
            if (opt_sigma->count()) cfg.sigma = tcfg.sigma;
            if (opt_kmax->count()) cfg.k_max = tcfg.k_max;
            if (opt_thr->count()) cfg.peak_threshold = tcfg.peak_threshold;
            if (opt_aug->count()) cfg.augment = tcfg.augment;
            if (opt_jit->count()) cfg.jitter_anchors = tcfg.jitter_anchors;
            if (opt_jpos->count()) cfg.jitter_pos_px = tcfg.jitter_pos_px;
            if (opt_jth->count()) cfg.jitter_theta_rad = tcfg.jitter_theta_rad;
            if (opt_workers->count()) cfg.num_workers = tcfg.num_workers;
            if (opt_dataset->count()) cfg.dataset = tcfg.dataset;
            if (opt_root->count()) cfg.image_root = tcfg.image_root;
            return cmd_train(train, cfg, train_out);
        }
        if (infer->parsed())
            return cmd_infer(infer_ckpt, infer_images, infer_out, infer_kmax, infer_thr);
        if (eval->parsed())
            return cmd_eval(eval_pred, eval_gt, eval_w, eval_h, eval_iou_width, eval_tusimple,
                            eval_out);
        if (viz->parsed()) {
            if (viz_ckpt.empty() == viz_pred.empty())
                throw std::runtime_error("viz needs exactly one of --checkpoint or --pred");
            return cmd_viz(viz_ckpt, viz_pred, viz_images, viz_out, viz_kmax, viz_thr);
        }
    } catch (const std::exception& e) {
        std::cerr << "dalnet: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
