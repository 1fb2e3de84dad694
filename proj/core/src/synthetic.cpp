#include "vitkit/synthetic.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace vita {

namespace {

struct Instance {
    int category;
    int id;
    double radius;
    double x, y, vx, vy;
    double brightness;
};

const std::array<std::array<float, 3>, 3> kCategoryColor = {{
    {0.90f, 0.25f, 0.20f},  // disk
    {0.20f, 0.85f, 0.30f},  // square
    {0.25f, 0.40f, 0.95f},  // triangle
}};

bool inside_shape(int category, double dx, double dy, double r) {
    switch (category) {
        case 0:
            return dx * dx + dy * dy <= r * r;
        case 1:
            return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
        default: {
            // upward triangle with vertices (0,-r), (+-0.95r, 0.8r)
            const double x1 = 0.0, y1 = -r;
            const double x2 = -0.95 * r, y2 = 0.8 * r;
            const double x3 = 0.95 * r, y3 = 0.8 * r;
            auto side = [&](double ax, double ay, double bx, double by) {
                return (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
            };
            const double d1 = side(x1, y1, x2, y2);
            const double d2 = side(x2, y2, x3, y3);
            const double d3 = side(x3, y3, x1, y1);
            const bool has_neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
            const bool has_pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
            return !(has_neg && has_pos);
        }
    }
}

void reflect(double& pos, double& vel, double lo, double hi) {
    if (pos < lo) {
        pos = 2 * lo - pos;
        vel = -vel;
    } else if (pos > hi) {
        pos = 2 * hi - pos;
        vel = -vel;
    }
}

SyntheticVideo render(const SceneSpec& spec, std::vector<Instance> insts) {
    const i64 T = spec.T, H = spec.H, W = spec.W;
    SyntheticVideo video;
    video.frames = Tensor<float>::zeros({T, 3, H, W});
    video.gt.T = T;
    video.gt.H = H;
    video.gt.W = W;
    for (const auto& in : insts) {
        GtInstance g;
        g.category = in.category;
        g.instance_id = in.id;
        g.masks.assign(static_cast<std::size_t>(T * H * W), 0);
        video.gt.tracklets.push_back(std::move(g));
    }
    float* px = video.frames.data().data();
    for (i64 t = 0; t < T; ++t) {
        for (i64 y = 0; y < H; ++y)
            for (i64 x = 0; x < W; ++x) {
                // topmost instance covering this pixel (later index = on top)
                int top = -1;
                for (int k = static_cast<int>(insts.size()) - 1; k >= 0; --k) {
                    const auto& in = insts[static_cast<std::size_t>(k)];
                    if (inside_shape(in.category, static_cast<double>(x) - in.x, static_cast<double>(y) - in.y,
                                     in.radius)) {
                        top = k;
                        break;
                    }
                }
                const i64 p = y * W + x;
                if (top < 0) {
                    for (int c = 0; c < 3; ++c) px[(t * 3 + c) * H * W + p] = 0.08f;
                } else {
                    const auto& in = insts[static_cast<std::size_t>(top)];
                    for (int c = 0; c < 3; ++c)
                        px[(t * 3 + c) * H * W + p] =
                            static_cast<float>(in.brightness) * kCategoryColor[static_cast<std::size_t>(in.category)][static_cast<std::size_t>(c)];
                    video.gt.tracklets[static_cast<std::size_t>(top)].masks[t * H * W + p] = 1;
                }
            }
        for (auto& in : insts) {
            in.x += in.vx;
            in.y += in.vy;
            reflect(in.x, in.vx, in.radius, static_cast<double>(W) - 1.0 - in.radius);
            reflect(in.y, in.vy, in.radius, static_cast<double>(H) - 1.0 - in.radius);
        }
    }
    return video;
}

bool all_instances_seen(const SyntheticVideo& v) {
    for (std::size_t i = 0; i < v.gt.tracklets.size(); ++i) {
        bool seen = false;
        for (i64 t = 0; t < v.gt.T && !seen; ++t) seen = v.gt.present_at(i, t);
        if (!seen) return false;
    }
    return true;
}

SyntheticVideo generate_once(const SceneSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double max_r = spec.max_radius;
    if (2.0 * max_r + 4.0 > static_cast<double>(std::min(spec.H, spec.W)))
        throw std::invalid_argument("generate_video: canvas too small for shape radius");

    std::vector<Instance> insts;
    if (spec.crossing) {
        const int cat = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.categories));
        const double r = spec.min_radius + unit(rng) * (spec.max_radius - spec.min_radius);
        const double y0 = static_cast<double>(spec.H) / 2.0 + (unit(rng) - 0.5) * 6.0;
        const double x_l = r + 2.0, x_r = static_cast<double>(spec.W) - 1.0 - r - 2.0;
        // opposite horizontal velocities sized so the pair swaps sides
        const double v = (x_r - x_l) / static_cast<double>(std::max<i64>(spec.T - 1, 1));
        insts.push_back({cat, 1, r, x_l, y0 - 1.5, v, 0.0, 1.0});
        insts.push_back({cat, 2, r, x_r, y0 + 1.5, -v, 0.0, 0.78});
    } else {
        std::uniform_int_distribution<int> ninst(spec.min_instances, spec.max_instances);
        const int n = ninst(rng);
        for (int k = 0; k < n; ++k) {
            Instance in;
            in.category = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.categories));
            in.id = k + 1;
            in.radius = spec.min_radius + unit(rng) * (spec.max_radius - spec.min_radius);
            in.x = in.radius + unit(rng) * (static_cast<double>(spec.W) - 1.0 - 2.0 * in.radius);
            in.y = in.radius + unit(rng) * (static_cast<double>(spec.H) - 1.0 - 2.0 * in.radius);
            const double speed = spec.min_speed + unit(rng) * (spec.max_speed - spec.min_speed);
            const double angle = unit(rng) * 2.0 * 3.14159265358979323846;
            in.vx = speed * std::cos(angle);
            in.vy = speed * std::sin(angle);
            in.brightness = 0.72 + 0.28 * unit(rng);
            insts.push_back(in);
        }
    }
    return render(spec, std::move(insts));
}

float sample_bilinear(const float* img, i64 h, i64 w, double y, double x) {
    if (y < 0) y = 0;
    if (x < 0) x = 0;
    i64 y0 = static_cast<i64>(y);
    i64 x0 = static_cast<i64>(x);
    if (y0 > h - 1) y0 = h - 1;
    if (x0 > w - 1) x0 = w - 1;
    const i64 y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
    return static_cast<float>((1 - fy) * ((1 - fx) * img[y0 * w + x0] + fx * img[y0 * w + x1]) +
                              fy * ((1 - fx) * img[y1 * w + x0] + fx * img[y1 * w + x1]));
}

}  // namespace

SyntheticVideo generate_video(const SceneSpec& spec) {
    if (spec.T < 1) throw std::invalid_argument("generate_video: T must be >= 1");
    for (int attempt = 0; attempt < 10; ++attempt) {
        SyntheticVideo v = generate_once(spec, spec.seed * 1000003ull + static_cast<std::uint64_t>(attempt));
        if (all_instances_seen(v)) return v;
    }
    throw std::runtime_error("generate_video: failed to render all instances visible after 10 attempts");
}

SyntheticVideo pseudo_video_from_image(const Tensor<float>& image, const std::vector<GtInstance>& instances,
                                       i64 frames, i64 canvas, std::uint64_t seed) {
    const auto& sh = image.shape();
    if (sh.size() != 3 || sh[0] != 3) throw std::invalid_argument("pseudo_video_from_image: image must be [3,H,W]");
    const i64 h0 = sh[1], w0 = sh[2];

    for (int attempt = 0; attempt < 10; ++attempt) {
        std::mt19937_64 rng(seed * 9176ull + static_cast<std::uint64_t>(attempt));
        const i64 shorts[3] = {40, 50, 60};
        const i64 target_short = shorts[rng() % 3];
        const double s = static_cast<double>(target_short) / static_cast<double>(std::min(h0, w0));
        const i64 h = std::max<i64>(static_cast<i64>(std::lround(h0 * s)), target_short);
        const i64 w = std::max<i64>(static_cast<i64>(std::lround(w0 * s)), target_short);
        if (std::min(h, w) < 38) throw std::invalid_argument("pseudo_video_from_image: image too small to crop");

        SyntheticVideo video;
        video.frames = Tensor<float>::zeros({frames, 3, canvas, canvas});
        video.gt.T = frames;
        video.gt.H = canvas;
        video.gt.W = canvas;
        for (const auto& in : instances) {
            GtInstance g;
            g.category = in.category;
            g.instance_id = in.instance_id;
            g.masks.assign(static_cast<std::size_t>(frames * canvas * canvas), 0);
            video.gt.tracklets.push_back(std::move(g));
        }

        for (i64 t = 0; t < frames; ++t) {
            const i64 max_side = std::min<i64>(60, std::min(h, w));
            const i64 side = 38 + static_cast<i64>(rng() % static_cast<std::uint64_t>(max_side - 38 + 1));
            const i64 oy = static_cast<i64>(rng() % static_cast<std::uint64_t>(h - side + 1));
            const i64 ox = static_cast<i64>(rng() % static_cast<std::uint64_t>(w - side + 1));
            for (i64 cy = 0; cy < canvas; ++cy)
                for (i64 cx = 0; cx < canvas; ++cx) {
                    // map canvas pixel -> crop -> resized image -> source image
                    const double yc = (static_cast<double>(cy) + 0.5) * static_cast<double>(side) / static_cast<double>(canvas) - 0.5;
                    const double xc = (static_cast<double>(cx) + 0.5) * static_cast<double>(side) / static_cast<double>(canvas) - 0.5;
                    const double ys = (static_cast<double>(oy) + yc + 0.5) / s - 0.5;
                    const double xs = (static_cast<double>(ox) + xc + 0.5) / s - 0.5;
                    for (int c = 0; c < 3; ++c)
                        video.frames.data()[((t * 3 + c) * canvas + cy) * canvas + cx] =
                            sample_bilinear(image.data().data() + c * h0 * w0, h0, w0, ys, xs);
                    const i64 ny = std::clamp<i64>(static_cast<i64>(std::lround(ys)), 0, h0 - 1);
                    const i64 nx = std::clamp<i64>(static_cast<i64>(std::lround(xs)), 0, w0 - 1);
                    for (std::size_t k = 0; k < instances.size(); ++k)
                        if (instances[k].masks[static_cast<std::size_t>(ny * w0 + nx)])
                            video.gt.tracklets[k].masks[(t * canvas + cy) * canvas + cx] = 1;
                }
        }
        bool any_visible = false;
        for (std::size_t k = 0; k < video.gt.tracklets.size() && !any_visible; ++k)
            for (i64 t = 0; t < frames && !any_visible; ++t) any_visible = video.gt.present_at(k, t);
        if (any_visible || instances.empty()) return video;
    }
    throw std::runtime_error("pseudo_video_from_image: no instance visible after 10 attempts");
}

// ---- "VIDS" container ----

namespace {

constexpr std::uint32_t kDatasetVersion = 1;

class Reader {
public:
    explicit Reader(std::istream& is) : is_(is) {}
    void bytes(void* dst, std::size_t n) {
        if (!is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n)))
            throw std::runtime_error("dataset: parse error, truncated at offset " + std::to_string(off_));
        off_ += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, 8);
        return v;
    }
    void skip(std::size_t n) {
        if (!is_.seekg(static_cast<std::streamoff>(n), std::ios::cur))
            throw std::runtime_error("dataset: parse error, truncated at offset " + std::to_string(off_));
        off_ += n;
    }
    std::size_t offset() const { return off_; }

private:
    std::istream& is_;
    std::size_t off_ = 0;
};

SyntheticVideo read_video(Reader& r) {
    SyntheticVideo v;
    v.gt.T = static_cast<i64>(r.u64());
    v.gt.H = static_cast<i64>(r.u64());
    v.gt.W = static_cast<i64>(r.u64());
    v.frames = Tensor<float>::zeros({v.gt.T, 3, v.gt.H, v.gt.W});
    r.bytes(v.frames.data().data(), static_cast<std::size_t>(v.frames.size()) * 4);
    const std::uint64_t ninst = r.u64();
    for (std::uint64_t k = 0; k < ninst; ++k) {
        GtInstance g;
        g.category = static_cast<int>(r.u32());
        g.instance_id = static_cast<int>(r.u32());
        std::vector<std::uint32_t> runs(r.u64());
        r.bytes(runs.data(), runs.size() * 4);
        g.masks = rle_decode(runs, static_cast<std::size_t>(v.gt.T * v.gt.H * v.gt.W));
        v.gt.tracklets.push_back(std::move(g));
    }
    return v;
}

void check_header(Reader& r, const std::string& path) {
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "VIDS", 4) != 0) throw std::runtime_error("dataset: bad magic in " + path);
    const std::uint32_t ver = r.u32();
    if (ver != kDatasetVersion) throw std::runtime_error("dataset: unsupported version " + std::to_string(ver));
}

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

}  // namespace

void save_dataset(const std::vector<SyntheticVideo>& videos, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("dataset: cannot open " + path + " for writing");
    os.write("VIDS", 4);
    put_u32(os, kDatasetVersion);
    put_u64(os, videos.size());
    for (const auto& v : videos) {
        put_u64(os, static_cast<std::uint64_t>(v.gt.T));
        put_u64(os, static_cast<std::uint64_t>(v.gt.H));
        put_u64(os, static_cast<std::uint64_t>(v.gt.W));
        os.write(reinterpret_cast<const char*>(v.frames.data().data()),
                 static_cast<std::streamsize>(v.frames.size()) * 4);
        put_u64(os, v.gt.tracklets.size());
        for (const auto& g : v.gt.tracklets) {
            put_u32(os, static_cast<std::uint32_t>(g.category));
            put_u32(os, static_cast<std::uint32_t>(g.instance_id));
            const auto runs = rle_encode(g.masks);
            put_u64(os, runs.size());
            os.write(reinterpret_cast<const char*>(runs.data()), static_cast<std::streamsize>(runs.size()) * 4);
        }
    }
    if (!os) throw std::runtime_error("dataset: write failed for " + path);
}

std::vector<SyntheticVideo> load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot open " + path);
    Reader r(is);
    check_header(r, path);
    const std::uint64_t count = r.u64();
    std::vector<SyntheticVideo> videos;
    videos.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) videos.push_back(read_video(r));
    return videos;
}

DatasetReader::DatasetReader(const std::string& path) : path_(path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot open " + path);
    Reader r(is);
    check_header(r, path);
    const std::uint64_t count = r.u64();
    offsets_.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        offsets_.push_back(r.offset());
        const std::uint64_t t = r.u64(), h = r.u64(), w = r.u64();
        r.skip(static_cast<std::size_t>(t * 3 * h * w) * 4);
        const std::uint64_t ninst = r.u64();
        for (std::uint64_t k = 0; k < ninst; ++k) {
            r.skip(8);
            r.skip(static_cast<std::size_t>(r.u64()) * 4);
        }
    }
}

SyntheticVideo DatasetReader::load(std::size_t index) const {
    if (index >= offsets_.size()) throw std::out_of_range("dataset: video index out of range");
    std::ifstream is(path_, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot open " + path_);
    if (!is.seekg(static_cast<std::streamoff>(offsets_[index])))
        throw std::runtime_error("dataset: seek failed in " + path_);
    Reader r(is);
    return read_video(r);
}

}  // namespace vita
