#pragma once

// Self-describing checkpoint directories: model.json (architecture) plus the
// parameter manifest and one float32 file per parameter.

#include <filesystem>
#include <fstream>
#include <memory>

#include <json.hpp>

#include "rcn/model.hpp"

namespace rcn {

inline constexpr int kModelFormatVersion = 1;
inline constexpr const char* kModelFile = "model.json";

inline std::string to_string(ShotAggregation a) { return a == ShotAggregation::mean ? "mean" : "max"; }

inline ShotAggregation parse_aggregation(const std::string& s) {
    if (s == "mean") return ShotAggregation::mean;
    if (s == "max") return ShotAggregation::max;
    throw std::invalid_argument("unknown shot aggregation '" + s + "' (expected mean|max)");
}

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"format", "rcn-model"},
            {"version", kModelFormatVersion},
            {"backbone",
             {{"blocks", c.backbone.blocks},
              {"channels", c.backbone.channels},
              {"in_channels", c.backbone.in_channels},
              {"image_h", c.backbone.image_h},
              {"image_w", c.backbone.image_w},
              {"out_h", c.backbone.out_h},
              {"out_w", c.backbone.out_w}}},
            {"head", to_string(c.head)},
            {"metric", to_string(c.metric.kind)},
            {"metric_eps", c.metric.eps},
            {"meta_hidden", c.meta_hidden},
            {"aggregation", to_string(c.aggregation)},
            {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "rcn-model") throw std::invalid_argument("not a model description");
    if (j.value("version", 0) != kModelFormatVersion)
        throw std::invalid_argument("unsupported model format version " + std::to_string(j.value("version", 0)));
    ModelConfig c;
    const auto& b = j.at("backbone");
    c.backbone.blocks = b.at("blocks");
    c.backbone.channels = b.at("channels");
    c.backbone.in_channels = b.at("in_channels");
    c.backbone.image_h = b.at("image_h");
    c.backbone.image_w = b.at("image_w");
    c.backbone.out_h = b.at("out_h");
    c.backbone.out_w = b.at("out_w");
    c.head = parse_head(j.at("head"));
    c.metric.kind = parse_metric(j.at("metric"));
    c.metric.eps = j.value("metric_eps", 1e-8);
    c.meta_hidden = j.at("meta_hidden");
    c.aggregation = parse_aggregation(j.value("aggregation", "mean"));
    c.seed = j.at("seed");
    return c;
}

template <class T>
void save_checkpoint(const RcnModel<T>& model, const std::filesystem::path& dir) {
    model.params().save(dir);
    std::ofstream os(dir / kModelFile);
    if (!os) throw std::runtime_error("cannot write " + (dir / kModelFile).string());
    os << to_json(model.config()).dump(2) << '\n';
}

template <class T>
std::unique_ptr<RcnModel<T>> load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream is(dir / kModelFile);
    if (!is) throw std::invalid_argument("no checkpoint at " + dir.string() + " (missing " + kModelFile + ")");
    auto model = std::make_unique<RcnModel<T>>(model_config_from_json(nlohmann::json::parse(is)));
    model->params().load(dir);
    return model;
}

}  // namespace rcn
