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

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dal/nn/model.hpp"

// Versioned checkpoint container: a magic tag, a JSON header echoing the
// model configuration, then named float64 parameter arrays. Loading
// validates that names and element counts match the target model exactly.

namespace dal::nn {

inline constexpr char kCheckpointMagic[8] = {'D', 'A', 'L', 'C', 'K', 'P', 'T', '1'};

inline void to_json(nlohmann::json& j, const ModelConfig& cfg) {
    j = nlohmann::json{{"input_h", cfg.input_h},
                       {"input_w", cfg.input_w},
                       {"stage_widths", cfg.stage_widths},
                       {"fpn_channels", cfg.fpn_channels},
                       {"n_sample_points", cfg.n_sample_points},
                       {"n_rows", cfg.n_rows},
                       {"ppm_bins", cfg.ppm_bins},
                       {"generator_hidden", cfg.generator_hidden},
                       {"leaky_slope", cfg.leaky_slope},
                       {"heatmap_bias_init", cfg.heatmap_bias_init},
                       {"heatmap_clamp", cfg.heatmap_clamp}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& cfg) {
    j.at("input_h").get_to(cfg.input_h);
    j.at("input_w").get_to(cfg.input_w);
    j.at("stage_widths").get_to(cfg.stage_widths);
    j.at("fpn_channels").get_to(cfg.fpn_channels);
    j.at("n_sample_points").get_to(cfg.n_sample_points);
    j.at("n_rows").get_to(cfg.n_rows);
    j.at("ppm_bins").get_to(cfg.ppm_bins);
    j.at("generator_hidden").get_to(cfg.generator_hidden);
    j.at("leaky_slope").get_to(cfg.leaky_slope);
    j.at("heatmap_bias_init").get_to(cfg.heatmap_bias_init);
    j.at("heatmap_clamp").get_to(cfg.heatmap_clamp);
}

namespace detail {

template <typename V>
void write_pod(std::ostream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw std::runtime_error("truncated checkpoint");
    return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg, DalnetParams<T>& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));

    auto refs = collect_params(params);
    nlohmann::json header;
    header["format_version"] = 1;
    header["scalar"] = sizeof(T) == 4 ? "float32" : "float64";
    header["model"] = cfg;
    header["n_params"] = refs.size();
    const std::string header_str = header.dump();
    detail::write_pod(os, static_cast<std::uint64_t>(header_str.size()));
    os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

    for (const auto& ref : refs) {
        detail::write_pod(os, static_cast<std::uint32_t>(ref.name.size()));
        os.write(ref.name.data(), static_cast<std::streamsize>(ref.name.size()));
        detail::write_pod(os, static_cast<std::uint64_t>(ref.size));
        for (std::ptrdiff_t i = 0; i < ref.size; ++i)
            detail::write_pod(os, static_cast<double>(ref.data[i]));
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

inline ModelConfig peek_checkpoint_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
        throw std::runtime_error("not a checkpoint file: " + path);
    const auto header_size = detail::read_pod<std::uint64_t>(is);
    std::string header_str(header_size, '\0');
    is.read(header_str.data(), static_cast<std::streamsize>(header_size));
    if (!is) throw std::runtime_error("truncated checkpoint header: " + path);
    auto header = nlohmann::json::parse(header_str);
    if (header.at("format_version").get<int>() != 1)
        throw std::runtime_error("unsupported checkpoint format version");
    return header.at("model").get<ModelConfig>();
}

template <typename T>
void load_checkpoint(const std::string& path, DalnetModel<T>& model) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
        throw std::runtime_error("not a checkpoint file: " + path);
    const auto header_size = detail::read_pod<std::uint64_t>(is);
    std::string header_str(header_size, '\0');
    is.read(header_str.data(), static_cast<std::streamsize>(header_size));
    auto header = nlohmann::json::parse(header_str);
    if (header.at("format_version").get<int>() != 1)
        throw std::runtime_error("unsupported checkpoint format version");

    auto refs = collect_params(model.params());
    if (header.at("n_params").get<std::size_t>() != refs.size())
        throw std::runtime_error("checkpoint parameter count does not match the model");
    for (auto& ref : refs) {
        const auto name_len = detail::read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is || name != ref.name)
            throw std::runtime_error("checkpoint parameter mismatch: expected '" + ref.name +
                                     "', found '" + name + "'");
        const auto count = detail::read_pod<std::uint64_t>(is);
        if (static_cast<std::ptrdiff_t>(count) != ref.size)
            throw std::runtime_error("checkpoint shape mismatch for '" + ref.name + "'");
        for (std::ptrdiff_t i = 0; i < ref.size; ++i)
            ref.data[i] = static_cast<T>(detail::read_pod<double>(is));
    }
}

}  // namespace dal::nn
