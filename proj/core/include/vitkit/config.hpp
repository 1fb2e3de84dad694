#pragma once

#include <string>
#include <vector>

#include "vitkit/tensor.hpp"

namespace vita {

struct ModelConfig {
    i64 channels = 64;       // shared embedding width C
    i64 frame_queries = 20;  // N_f
    i64 video_queries = 20;  // N_v
    int categories = 3;      // K; class index K is "no object"
    i64 stride = 4;          // S of the pixel-embedding map
    int detector_layers = 3;
    int encoder_layers = 3;
    int decoder_layers = 6;
    int heads = 8;
    i64 window = 6;  // temporal window W
    i64 ffn_hidden = 128;
    std::vector<i64> backbone_channels = {16, 32, 64, 64};
    bool positional_encoding = true;   // sinusoidal 2-D encoding on pixel keys
    bool temporal_embedding = false;   // learned temporal embedding on object tokens
    int supervision_layers = 3;        // deep supervision depth
};

struct LossWeights {
    double lambda_v = 1.0;
    double lambda_f = 1.0;
    double lambda_sim = 0.5;
    double lambda_cls = 2.0;
    double lambda_ce = 2.0;
    double lambda_dice = 5.0;
    double no_object_weight = 0.1;
    bool shared_sim_embed = true;
};

struct DataConfig {
    i64 canvas = 64;
    i64 clip_len = 6;  // T at training time
    int min_instances = 1, max_instances = 4;
    int categories = 3;
    int train_videos = 2000;
    int val_videos = 100;
    std::uint64_t seed = 0;
};

struct TrainConfig {
    int steps = 8000;
    int stage1_steps = 0;  // optional detector-only pretraining on single frames
    double lr = 1e-4;
    int lr_decay_step = 6000;
    double lr_decay = 0.1;
    int batch = 8;
    double weight_decay = 0.05;
    std::uint64_t seed = 0;
    bool frozen_detector = false;
    bool prune_in_training = false;
    int checkpoint_every = 2000;
    int log_every = 25;
};

struct EvalConfig {
    double prune_ratio = 1.0;  // r; 1.0 = keep everything
    double score_threshold = 0.05;
    int top_k = 10;
};

struct ExperimentConfig {
    ModelConfig model;
    LossWeights loss;
    DataConfig data;
    TrainConfig train;
    EvalConfig eval;
};

/// JSON round trip. Unknown keys are rejected; missing keys keep defaults.
ExperimentConfig parse_config(const std::string& json_text);
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config_file(const std::string& path);

/// Stable content hash of the serialized config (for run manifests).
std::uint64_t config_hash(const ExperimentConfig& cfg);

}  // namespace vita
