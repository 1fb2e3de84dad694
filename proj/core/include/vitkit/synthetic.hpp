#pragma once

#include "vitkit/video.hpp"

namespace vita {

/// Moving-shape scene description. Categories are shape types: 0 = disk,
/// 1 = square, 2 = triangle.
struct SceneSpec {
    i64 H = 64, W = 64;
    i64 T = 6;
    int min_instances = 1, max_instances = 4;
    int categories = 3;
    double min_radius = 6.0, max_radius = 11.0;
    double min_speed = 0.5, max_speed = 2.0;
    std::uint64_t seed = 0;
    // Two same-category instances start on opposite sides and swap, meeting
    // (and partially occluding) mid-video.
    bool crossing = false;
};

SyntheticVideo generate_video(const SceneSpec& spec);

/// Pseudo-video built by cropping one annotated image T times: resize the
/// short side to one of {40,50,60}, take T random square crops with side in
/// [38,60], resize each crop to the canvas. Instance ids are stable across
/// crops; a fully cropped-out instance has an empty mask at that frame.
SyntheticVideo pseudo_video_from_image(const Tensor<float>& image,  // [3,H,W]
                                       const std::vector<GtInstance>& instances,  // masks are [H*W]
                                       i64 frames, i64 canvas, std::uint64_t seed);

/// "VIDS" container: magic, version, then per-video frames + RLE ground truth.
void save_dataset(const std::vector<SyntheticVideo>& videos, const std::string& path);
std::vector<SyntheticVideo> load_dataset(const std::string& path);

/// Random access into a "VIDS" file without holding every video in memory.
class DatasetReader {
public:
    explicit DatasetReader(const std::string& path);
    std::size_t size() const { return offsets_.size(); }
    SyntheticVideo load(std::size_t index) const;

private:
    std::string path_;
    std::vector<std::uint64_t> offsets_;
};

}  // namespace vita
