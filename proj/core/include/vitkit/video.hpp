#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitkit/tensor.hpp"

namespace vita {

/// One ground-truth instance across a whole video. The mask is the visible
/// (post-occlusion) region; it may be empty at frames where the instance is
/// fully hidden or cropped out.
struct GtInstance {
    int category = 0;
    int instance_id = 0;
    std::vector<std::uint8_t> masks;  // [T*H*W], 0/1
};

struct VideoGroundTruth {
    i64 T = 0, H = 0, W = 0;
    std::vector<GtInstance> tracklets;

    std::vector<std::uint8_t> frame_mask(std::size_t inst, i64 t) const {
        const auto& m = tracklets[inst].masks;
        return {m.begin() + t * H * W, m.begin() + (t + 1) * H * W};
    }
    bool present_at(std::size_t inst, i64 t) const {
        const auto& m = tracklets[inst].masks;
        for (i64 i = t * H * W; i < (t + 1) * H * W; ++i)
            if (m[i]) return true;
        return false;
    }
};

struct SyntheticVideo {
    Tensor<float> frames;  // [T,3,H,W] in [0,1]
    VideoGroundTruth gt;
};

struct TrackletPrediction {
    int category = 0;
    double score = 0.0;
    std::vector<std::uint8_t> masks;  // [T*H*W], 0/1
};

// Run-length encoding over a flat binary mask; runs alternate 0/1 and start
// with a zero-run.
std::vector<std::uint32_t> rle_encode(const std::vector<std::uint8_t>& mask);
std::vector<std::uint8_t> rle_decode(const std::vector<std::uint32_t>& runs, std::size_t size);

}  // namespace vita
