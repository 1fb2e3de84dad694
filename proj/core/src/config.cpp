#include "vitkit/config.hpp"

#include <fstream>
#include <json.hpp>

namespace vita {

namespace {

using nlohmann::json;

template <class T>
void take(json& j, const char* key, T& out) {
    if (auto it = j.find(key); it != j.end()) {
        out = it->get<T>();
        j.erase(it);
    }
}

void expect_empty(const json& j, const std::string& where) {
    if (!j.empty())
        throw std::invalid_argument("config: unknown key \"" + j.begin().key() + "\" in " + where);
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
    json root = json::parse(json_text);
    ExperimentConfig cfg;
    if (auto it = root.find("model"); it != root.end()) {
        json j = *it;
        take(j, "channels", cfg.model.channels);
        take(j, "frame_queries", cfg.model.frame_queries);
        take(j, "video_queries", cfg.model.video_queries);
        take(j, "categories", cfg.model.categories);
        take(j, "stride", cfg.model.stride);
        take(j, "detector_layers", cfg.model.detector_layers);
        take(j, "encoder_layers", cfg.model.encoder_layers);
        take(j, "decoder_layers", cfg.model.decoder_layers);
        take(j, "heads", cfg.model.heads);
        take(j, "window", cfg.model.window);
        take(j, "ffn_hidden", cfg.model.ffn_hidden);
        take(j, "backbone_channels", cfg.model.backbone_channels);
        take(j, "positional_encoding", cfg.model.positional_encoding);
        take(j, "temporal_embedding", cfg.model.temporal_embedding);
        take(j, "supervision_layers", cfg.model.supervision_layers);
        expect_empty(j, "model");
        root.erase(it);
    }
    if (auto it = root.find("loss"); it != root.end()) {
        json j = *it;
        take(j, "lambda_v", cfg.loss.lambda_v);
        take(j, "lambda_f", cfg.loss.lambda_f);
        take(j, "lambda_sim", cfg.loss.lambda_sim);
        take(j, "lambda_cls", cfg.loss.lambda_cls);
        take(j, "lambda_ce", cfg.loss.lambda_ce);
        take(j, "lambda_dice", cfg.loss.lambda_dice);
        take(j, "no_object_weight", cfg.loss.no_object_weight);
        take(j, "shared_sim_embed", cfg.loss.shared_sim_embed);
        expect_empty(j, "loss");
        root.erase(it);
    }
    if (auto it = root.find("data"); it != root.end()) {
        json j = *it;
        take(j, "canvas", cfg.data.canvas);
        take(j, "clip_len", cfg.data.clip_len);
        take(j, "min_instances", cfg.data.min_instances);
        take(j, "max_instances", cfg.data.max_instances);
        take(j, "categories", cfg.data.categories);
        take(j, "train_videos", cfg.data.train_videos);
        take(j, "val_videos", cfg.data.val_videos);
        take(j, "seed", cfg.data.seed);
        expect_empty(j, "data");
        root.erase(it);
    }
    if (auto it = root.find("train"); it != root.end()) {
        json j = *it;
        take(j, "steps", cfg.train.steps);
        take(j, "stage1_steps", cfg.train.stage1_steps);
        take(j, "lr", cfg.train.lr);
        take(j, "lr_decay_step", cfg.train.lr_decay_step);
        take(j, "lr_decay", cfg.train.lr_decay);
        take(j, "batch", cfg.train.batch);
        take(j, "weight_decay", cfg.train.weight_decay);
        take(j, "seed", cfg.train.seed);
        take(j, "frozen_detector", cfg.train.frozen_detector);
        take(j, "prune_in_training", cfg.train.prune_in_training);
        take(j, "checkpoint_every", cfg.train.checkpoint_every);
        take(j, "log_every", cfg.train.log_every);
        expect_empty(j, "train");
        root.erase(it);
    }
    if (auto it = root.find("eval"); it != root.end()) {
        json j = *it;
        take(j, "prune_ratio", cfg.eval.prune_ratio);
        take(j, "score_threshold", cfg.eval.score_threshold);
        take(j, "top_k", cfg.eval.top_k);
        expect_empty(j, "eval");
        root.erase(it);
    }
    expect_empty(root, "config root");
    if (cfg.data.clip_len < 1) throw std::invalid_argument("config: clip_len must be >= 1");
    if (cfg.model.window < 1) throw std::invalid_argument("config: window must be >= 1");
    if (cfg.model.encoder_layers < 1 || cfg.model.decoder_layers < 1)
        throw std::invalid_argument("config: layer counts must be >= 1");
    return cfg;
}

std::string config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["model"] = {{"channels", cfg.model.channels},
                  {"frame_queries", cfg.model.frame_queries},
                  {"video_queries", cfg.model.video_queries},
                  {"categories", cfg.model.categories},
                  {"stride", cfg.model.stride},
                  {"detector_layers", cfg.model.detector_layers},
                  {"encoder_layers", cfg.model.encoder_layers},
                  {"decoder_layers", cfg.model.decoder_layers},
                  {"heads", cfg.model.heads},
                  {"window", cfg.model.window},
                  {"ffn_hidden", cfg.model.ffn_hidden},
                  {"backbone_channels", cfg.model.backbone_channels},
                  {"positional_encoding", cfg.model.positional_encoding},
                  {"temporal_embedding", cfg.model.temporal_embedding},
                  {"supervision_layers", cfg.model.supervision_layers}};
    j["loss"] = {{"lambda_v", cfg.loss.lambda_v},
                 {"lambda_f", cfg.loss.lambda_f},
                 {"lambda_sim", cfg.loss.lambda_sim},
                 {"lambda_cls", cfg.loss.lambda_cls},
                 {"lambda_ce", cfg.loss.lambda_ce},
                 {"lambda_dice", cfg.loss.lambda_dice},
                 {"no_object_weight", cfg.loss.no_object_weight},
                 {"shared_sim_embed", cfg.loss.shared_sim_embed}};
    j["data"] = {{"canvas", cfg.data.canvas},
                 {"clip_len", cfg.data.clip_len},
                 {"min_instances", cfg.data.min_instances},
                 {"max_instances", cfg.data.max_instances},
                 {"categories", cfg.data.categories},
                 {"train_videos", cfg.data.train_videos},
                 {"val_videos", cfg.data.val_videos},
                 {"seed", cfg.data.seed}};
    j["train"] = {{"steps", cfg.train.steps},
                  {"stage1_steps", cfg.train.stage1_steps},
                  {"lr", cfg.train.lr},
                  {"lr_decay_step", cfg.train.lr_decay_step},
                  {"lr_decay", cfg.train.lr_decay},
                  {"batch", cfg.train.batch},
                  {"weight_decay", cfg.train.weight_decay},
                  {"seed", cfg.train.seed},
                  {"frozen_detector", cfg.train.frozen_detector},
                  {"prune_in_training", cfg.train.prune_in_training},
                  {"checkpoint_every", cfg.train.checkpoint_every},
                  {"log_every", cfg.train.log_every}};
    j["eval"] = {{"prune_ratio", cfg.eval.prune_ratio},
                 {"score_threshold", cfg.eval.score_threshold},
                 {"top_k", cfg.eval.top_k}};
    return j.dump(2);
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_config(text);
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
    // FNV-1a over the canonical serialization
    std::uint64_t h = 1469598103934665603ull;
    for (char c : config_to_json(cfg)) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace vita
