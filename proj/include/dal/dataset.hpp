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

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dal/geometry.hpp"
#include "dal/image.hpp"

namespace dal {

inline constexpr double kRowNotCovered = -2.0;

/// One annotated frame in the JSON-lines format: per-lane x at shared
/// y-sample rows, -2 where a lane does not cover the row. Prediction
/// files carry an additional per-lane score array.
struct DatasetRecord {
    std::string raw_file;
    std::vector<double> h_samples;
    std::vector<std::vector<double>> lanes;
    std::vector<double> scores;  // empty for ground truth

    bool operator==(const DatasetRecord& o) const {
        return raw_file == o.raw_file && h_samples == o.h_samples && lanes == o.lanes &&
               scores == o.scores;
    }
};

inline void to_json(nlohmann::json& j, const DatasetRecord& r) {
    j = nlohmann::json{{"raw_file", r.raw_file}, {"h_samples", r.h_samples},
                       {"lanes", r.lanes}};
    if (!r.scores.empty()) j["scores"] = r.scores;
}

inline void from_json(const nlohmann::json& j, DatasetRecord& r) {
    j.at("raw_file").get_to(r.raw_file);
    j.at("h_samples").get_to(r.h_samples);
    j.at("lanes").get_to(r.lanes);
    r.scores.clear();
    if (j.contains("scores")) j.at("scores").get_to(r.scores);
}

inline void validate_record(const DatasetRecord& r) {
    for (const auto& lane : r.lanes) {
        if (lane.size() != r.h_samples.size())
            throw std::runtime_error("lane length does not match h_samples");
        int covered = 0;
        for (double x : lane) {
            if (x == kRowNotCovered) continue;
            if (x < 0) throw std::runtime_error("negative lane x-coordinate");
            ++covered;
        }
        if (covered < 2) throw std::runtime_error("lane covers fewer than 2 rows");
    }
    if (!r.scores.empty() && r.scores.size() != r.lanes.size())
        throw std::runtime_error("scores length does not match lanes");
}

inline void write_dataset(const std::string& path, const std::vector<DatasetRecord>& records) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write dataset: " + path);
    for (const auto& r : records) {
        nlohmann::json j = r;
        os << j.dump() << "\n";
    }
    if (!os) throw std::runtime_error("dataset write failed: " + path);
}

inline std::vector<DatasetRecord> read_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read dataset: " + path);
    std::vector<DatasetRecord> records;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            DatasetRecord r = nlohmann::json::parse(line).get<DatasetRecord>();
            validate_record(r);
            records.push_back(std::move(r));
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

/// Record from grid-row rails: h_samples are the grid rows, uncovered rows
/// hold the -2 sentinel.
inline DatasetRecord record_from_rails(const std::string& raw_file,
                                       const std::vector<RailAnnotation>& rails,
                                       const ImageGrid& grid,
                                       const std::vector<double>& scores = {}) {
    DatasetRecord r;
    r.raw_file = raw_file;
    r.h_samples.resize(grid.n_rows);
    for (int i = 0; i < grid.n_rows; ++i) r.h_samples[i] = grid.row_y(i);
    for (const auto& rail : rails) {
        std::vector<double> lane(grid.n_rows, kRowNotCovered);
        for (int i = rail.start_index; i <= rail.end_index(); ++i) lane[i] = rail.xs[i];
        r.lanes.push_back(std::move(lane));
    }
    r.scores = scores;
    return r;
}

/// Lane polylines of a record as (x, y) point lists, sentinel rows skipped.
inline std::vector<std::vector<std::pair<double, double>>> record_polylines(
    const DatasetRecord& r) {
    std::vector<std::vector<std::pair<double, double>>> out;
    for (const auto& lane : r.lanes) {
        std::vector<std::pair<double, double>> pts;
        for (std::size_t i = 0; i < lane.size(); ++i)
            if (lane[i] != kRowNotCovered) pts.emplace_back(lane[i], r.h_samples[i]);
        out.push_back(std::move(pts));
    }
    return out;
}

/// Source image -> model input: crop a top fraction of the rows, then
/// resize. Identity when the sizes already match.
struct Preprocess {
    int src_w = 800, src_h = 320;
    int dst_w = 800, dst_h = 320;
    int crop_top = 0;

    static Preprocess make(int src_w, int src_h, int dst_w, int dst_h,
                           double crop_top_frac = 0.45) {
        Preprocess p;
        p.src_w = src_w;
        p.src_h = src_h;
        p.dst_w = dst_w;
        p.dst_h = dst_h;
        p.crop_top = (src_w == dst_w && src_h == dst_h)
                         ? 0
                         : static_cast<int>(std::lround(src_h * crop_top_frac));
        if (p.crop_top >= src_h) throw std::invalid_argument("crop removes every row");
        return p;
    }

    bool identity() const {
        return crop_top == 0 && src_w == dst_w && src_h == dst_h;
    }

    ImageU8 apply(const ImageU8& img) const {
        if (identity()) return img;
        ImageU8 cropped(src_w, src_h - crop_top);
        for (int y = 0; y < cropped.height; ++y)
            for (int x = 0; x < src_w; ++x)
                for (int c = 0; c < 3; ++c) cropped.at(x, y, c) = img.at(x, y + crop_top, c);
        return resize_bilinear(cropped, dst_w, dst_h);
    }

    std::pair<double, double> to_model(double x, double y) const {
        return {x * dst_w / src_w, (y - crop_top) * dst_h / (src_h - crop_top)};
    }
    std::pair<double, double> to_source(double x, double y) const {
        return {x * src_w / dst_w, y * (src_h - crop_top) / dst_h + crop_top};
    }
};

/// Record lanes resampled onto the model grid through the preprocess map.
inline std::vector<RailAnnotation> rails_from_record(const DatasetRecord& r,
                                                     const Preprocess& pre,
                                                     const ImageGrid& model_grid) {
    std::vector<RailAnnotation> rails;
    for (auto& poly : record_polylines(r)) {
        for (auto& [x, y] : poly) std::tie(x, y) = pre.to_model(x, y);
        auto rail = resample_polyline(poly, model_grid);
        if (rail) rails.push_back(std::move(*rail));
    }
    return rails;
}

}  // namespace dal
