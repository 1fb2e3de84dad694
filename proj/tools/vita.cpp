#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "vitkit/eval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vita;

namespace {

constexpr const char* kCodeVersion = "vitkit 0.1.0";

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t seed, std::uint64_t k) { return splitmix64(seed * 0x100000001b3ull + k); }

int thread_count() {
    if (const char* env = std::getenv("VITA_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

std::string iso_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

/// First leaf key (dotted path) where the two config objects differ.
std::string first_config_difference(const json& a, const json& b, const std::string& prefix = "") {
    if (a.is_object() && b.is_object()) {
        for (auto it = a.begin(); it != a.end(); ++it) {
            const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
            if (!b.contains(it.key())) return path;
            const std::string d = first_config_difference(it.value(), b[it.key()], path);
            if (!d.empty()) return d;
        }
        for (auto it = b.begin(); it != b.end(); ++it)
            if (!a.contains(it.key())) return prefix.empty() ? it.key() : prefix + "." + it.key();
        return "";
    }
    return a == b ? "" : prefix;
}

// ---- shared option plumbing ----

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> steps, stage1_steps, batch, checkpoint_every, log_every;
    std::optional<double> lr, lambda_sim;
    std::optional<int> train_videos, val_videos;
    std::optional<i64> clip_len, window;
    std::optional<double> prune_r, score_threshold;
    bool frozen_detector = false;

    void apply(ExperimentConfig& cfg) const {
        if (seed) {
            cfg.train.seed = *seed;
            cfg.data.seed = *seed;
        }
        if (steps) cfg.train.steps = *steps;
        if (stage1_steps) cfg.train.stage1_steps = *stage1_steps;
        if (batch) cfg.train.batch = *batch;
        if (checkpoint_every) cfg.train.checkpoint_every = *checkpoint_every;
        if (log_every) cfg.train.log_every = *log_every;
        if (lr) cfg.train.lr = *lr;
        if (lambda_sim) cfg.loss.lambda_sim = *lambda_sim;
        if (train_videos) cfg.data.train_videos = *train_videos;
        if (val_videos) cfg.data.val_videos = *val_videos;
        if (clip_len) cfg.data.clip_len = *clip_len;
        if (window) cfg.model.window = *window;
        if (prune_r) cfg.eval.prune_ratio = *prune_r;
        if (score_threshold) cfg.eval.score_threshold = *score_threshold;
        if (frozen_detector) cfg.train.frozen_detector = true;
    }
};

void add_override_flags(CLI::App* cmd, Overrides& ov) {
    cmd->add_option("--seed", ov.seed, "Override data/train seed");
    cmd->add_option("--steps", ov.steps, "Override training step count");
    cmd->add_option("--stage1-steps", ov.stage1_steps, "Detector-only pretraining steps");
    cmd->add_option("--batch", ov.batch, "Clips per optimizer step");
    cmd->add_option("--checkpoint-every", ov.checkpoint_every, "Checkpoint interval in steps");
    cmd->add_option("--log-every", ov.log_every, "Log interval in steps");
    cmd->add_option("--lr", ov.lr, "Learning rate");
    cmd->add_option("--lambda-sim", ov.lambda_sim, "Similarity loss weight");
    cmd->add_option("--train-videos", ov.train_videos, "Training split size");
    cmd->add_option("--val-videos", ov.val_videos, "Validation split size");
    cmd->add_option("--clip-len", ov.clip_len, "Training clip length");
    cmd->add_option("--window", ov.window, "Encoder temporal window");
    cmd->add_option("--prune-r", ov.prune_r, "Token keep ratio at inference");
    cmd->add_option("--score-threshold", ov.score_threshold, "Minimum tracklet score");
    cmd->add_flag("--frozen-detector", ov.frozen_detector, "Freeze detector parameters");
}

ExperimentConfig load_cfg(const std::string& config_path, const Overrides& ov) {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config_file(config_path);
    ov.apply(cfg);
    return cfg;
}

void write_manifest(const fs::path& dir, const ExperimentConfig& cfg, const std::string& start_time,
                    const std::vector<std::string>& checkpoints) {
    json m;
    m["config_hash"] = config_hash(cfg);
    m["code_version"] = kCodeVersion;
    m["seed"] = cfg.train.seed;
    m["start_time"] = start_time;
    m["metrics_path"] = "train_log.csv";
    m["config_path"] = "config.json";
    m["checkpoints"] = checkpoints;
    write_text(dir / "manifest.json", m.dump(2) + "\n");
}

// ---- gen-data ----

SyntheticVideo make_video(const DataConfig& data, i64 T, std::uint64_t seed, bool crossing) {
    SceneSpec spec;
    spec.H = data.canvas;
    spec.W = data.canvas;
    spec.T = T;
    spec.min_instances = data.min_instances;
    spec.max_instances = data.max_instances;
    spec.categories = data.categories;
    spec.seed = seed;
    spec.crossing = crossing;
    return generate_video(spec);
}

int cmd_gen_data(const std::string& config_path, const Overrides& ov, const std::string& out_dir, bool force,
                 int crossing_count, i64 crossing_t) {
    ExperimentConfig cfg = load_cfg(config_path, ov);
    const fs::path dir(out_dir);
    if (fs::exists(dir / "train.vids") && !force)
        throw std::runtime_error(out_dir + " already holds a dataset; pass --force to overwrite");
    fs::create_directories(dir);

    const auto& d = cfg.data;
    std::vector<SyntheticVideo> train;
    for (int i = 0; i < d.train_videos; ++i) train.push_back(make_video(d, d.clip_len, mix(d.seed, i), false));
    save_dataset(train, (dir / "train.vids").string());
    train.clear();

    // validation spans the training clip length and longer horizons
    const i64 t_list[3] = {d.clip_len, 2 * d.clip_len, 6 * d.clip_len};
    std::vector<SyntheticVideo> val;
    for (int i = 0; i < d.val_videos; ++i)
        val.push_back(make_video(d, t_list[i % 3], mix(d.seed, 1000000 + i), false));
    save_dataset(val, (dir / "val.vids").string());
    val.clear();

    std::vector<SyntheticVideo> crossing;
    for (int i = 0; i < crossing_count; ++i)
        crossing.push_back(make_video(d, crossing_t, mix(d.seed, 2000000 + i), true));
    save_dataset(crossing, (dir / "crossing.vids").string());

    write_text(dir / "config.json", config_to_json(cfg));
    json m;
    m["config_hash"] = config_hash(cfg);
    m["code_version"] = kCodeVersion;
    m["seed"] = d.seed;
    m["start_time"] = iso_now();
    m["splits"] = {{"train", d.train_videos}, {"val", d.val_videos}, {"crossing", crossing_count}};
    write_text(dir / "manifest.json", m.dump(2) + "\n");
    std::cout << "wrote " << d.train_videos << " train, " << d.val_videos << " val, " << crossing_count
              << " crossing videos to " << out_dir << "\n";
    return 0;
}

// ---- train ----

SyntheticVideo single_frame_clip(const SyntheticVideo& v, i64 t) {
    SyntheticVideo out;
    out.frames = slice_rows(v.frames, t, 1).detach();
    out.gt.T = 1;
    out.gt.H = v.gt.H;
    out.gt.W = v.gt.W;
    const i64 fsz = v.gt.H * v.gt.W;
    for (const auto& g : v.gt.tracklets) {
        GtInstance one;
        one.category = g.category;
        one.instance_id = g.instance_id;
        one.masks.assign(g.masks.begin() + t * fsz, g.masks.begin() + (t + 1) * fsz);
        out.gt.tracklets.push_back(std::move(one));
    }
    return out;
}

int cmd_train(const std::string& config_path, const Overrides& ov, const std::string& data_dir,
              const std::string& out_dir, const std::string& resume) {
    ExperimentConfig cfg = load_cfg(config_path, ov);
    const fs::path dir(out_dir);
    fs::create_directories(dir);

    if (!resume.empty()) {
        const fs::path stored = dir / "config.json";
        if (fs::exists(stored)) {
            json a = json::parse(config_to_json(cfg));
            json b = json::parse(read_text(stored));
            // the step budget may grow when resuming an interrupted run
            a["train"].erase("steps");
            b["train"].erase("steps");
            const std::string diff = first_config_difference(a, b);
            if (!diff.empty())
                throw std::runtime_error("config does not match the run being resumed; differs at " + diff);
        }
    }
    write_text(dir / "config.json", config_to_json(cfg));
    const std::string start_time = iso_now();
    std::vector<std::string> checkpoints;
    write_manifest(dir, cfg, start_time, checkpoints);

    DatasetReader data((fs::path(data_dir) / "train.vids").string());
    if (data.size() == 0) throw std::runtime_error("training split in " + data_dir + " is empty");

    VitaModel<float> model(cfg, mix(cfg.train.seed, 0xA11CE));
    if (!resume.empty()) load_checkpoint(model.params(), resume);
    if (cfg.train.frozen_detector) model.freeze_detector();

    std::ofstream log(dir / "train_log.csv", std::ios::app);
    if (!log) throw std::runtime_error("cannot open training log in " + out_dir);
    if (model.params().step_count() == 0) log << "step,L_total,L_v,L_f,L_sim,lr\n";

    const int total_steps = cfg.train.stage1_steps + cfg.train.steps;
    AdamWConfig opt;
    opt.weight_decay = cfg.train.weight_decay;
    for (int step = static_cast<int>(model.params().step_count()) + 1; step <= total_steps; ++step) {
        const bool stage1 = step <= cfg.train.stage1_steps;
        Rng rng(mix(cfg.train.seed, static_cast<std::uint64_t>(step)));
        std::vector<SyntheticVideo> clips;
        std::vector<const SyntheticVideo*> batch;
        for (int b = 0; b < cfg.train.batch; ++b) {
            SyntheticVideo v = data.load(rng() % data.size());
            if (stage1) v = single_frame_clip(v, static_cast<i64>(rng() % static_cast<std::uint64_t>(v.gt.T)));
            clips.push_back(std::move(v));
        }
        for (const auto& c : clips) batch.push_back(&c);
        opt.lr = cfg.train.lr * (step > cfg.train.stage1_steps + cfg.train.lr_decay_step ? cfg.train.lr_decay : 1.0);
        const StepStats stats = model.train_batch(batch, opt, stage1);
        if (step % cfg.train.log_every == 0 || step == total_steps) {
            char line[192];
            std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", step, stats.total, stats.l_v,
                          stats.l_f, stats.l_sim, opt.lr);
            log << line << std::flush;
        }
        if (step % cfg.train.checkpoint_every == 0 || step == total_steps) {
            const std::string name = "ckpt_" + std::to_string(step) + ".vitk";
            save_checkpoint(model.params(), (dir / name).string());
            save_checkpoint(model.params(), (dir / "ckpt_latest.vitk").string());
            checkpoints.push_back(name);
            write_manifest(dir, cfg, start_time, checkpoints);
        }
    }
    std::cout << "trained to step " << total_steps << "; artifacts in " << out_dir << "\n";
    return 0;
}

// ---- eval / infer ----

ExperimentConfig config_for_checkpoint(const std::string& config_path, const std::string& checkpoint,
                                       const Overrides& ov) {
    std::string path = config_path;
    if (path.empty()) {
        const fs::path sibling = fs::path(checkpoint).parent_path() / "config.json";
        if (fs::exists(sibling)) path = sibling.string();
    }
    return load_cfg(path, ov);
}

struct EvalOutcome {
    ApResult ap;
    int id_switches = 0;
    i64 measured_peak = 0;
};

EvalOutcome evaluate_dataset(VitaModel<float>& model, const DatasetReader& data, const EvalConfig& ev,
                             i64 stitch_len, const std::string& stitch_method) {
    std::vector<std::vector<TrackletPrediction>> preds;
    std::vector<VideoGroundTruth> gts;
    EvalOutcome out;
    for (std::size_t i = 0; i < data.size(); ++i) {
        SyntheticVideo v = data.load(i);
        if (stitch_len > 0) {
            const StitchMethod m = stitch_method == "hungarian" ? StitchMethod::hungarian : StitchMethod::greedy;
            preds.push_back(clip_stitch(model, v.frames, stitch_len, m, ev));
        } else {
            auto inf = model.infer_video(v.frames, ev);
            out.measured_peak = std::max(out.measured_peak, inf.peak_elements);
            preds.push_back(std::move(inf.tracklets));
        }
        out.id_switches += id_switch_count(preds.back(), v.gt);
        gts.push_back(std::move(v.gt));
    }
    std::vector<const VideoGroundTruth*> gtp;
    for (const auto& g : gts) gtp.push_back(&g);
    out.ap = video_ap(preds, gtp, model.config().model.categories);
    return out;
}

int cmd_eval(const std::string& config_path, const Overrides& ov, const std::string& checkpoint,
             const std::string& data_path, i64 stitch_len, const std::string& stitch_method,
             const std::string& csv_path) {
    ExperimentConfig cfg = config_for_checkpoint(config_path, checkpoint, ov);
    if (cfg.eval.prune_ratio <= 0.0 || cfg.eval.prune_ratio > 1.0)
        throw std::invalid_argument("prune ratio must be in (0, 1]");
    VitaModel<float> model(cfg, mix(cfg.train.seed, 0xA11CE));
    load_checkpoint(model.params(), checkpoint);

    DatasetReader data(data_path);
    const EvalOutcome r = evaluate_dataset(model, data, cfg.eval, stitch_len, stitch_method);
    SyntheticVideo probe = data.load(0);
    const MemoryReport mem =
        memory_report(cfg.model, probe.gt.T, probe.gt.H, probe.gt.W, cfg.eval.prune_ratio);

    std::printf("AP=%.4f\nAP50=%.4f\nAP75=%.4f\nAR10=%.4f\nid_switches=%d\n", r.ap.ap, r.ap.ap50, r.ap.ap75,
                r.ap.ar10, r.id_switches);
    std::printf("decoder_keys=%lld\ndense_counterfactual_keys=%lld\nretained_floats=%lld\nmeasured_peak_floats=%lld\n",
                static_cast<long long>(mem.decoder_keys), static_cast<long long>(mem.dense_counterfactual_keys),
                static_cast<long long>(mem.retained_total()), static_cast<long long>(r.measured_peak));
    if (!csv_path.empty()) {
        const bool fresh = !fs::exists(csv_path);
        std::ofstream csv(csv_path, std::ios::app);
        if (!csv) throw std::runtime_error("cannot open " + csv_path + " for writing");
        if (fresh) csv << "window,prune_r,clip_len,stitch,AP,AP50,AP75,AR10,id_switches,decoder_keys\n";
        char line[256];
        std::snprintf(line, sizeof(line), "%lld,%.2f,%lld,%s,%.4f,%.4f,%.4f,%.4f,%d,%lld\n",
                      static_cast<long long>(cfg.model.window), cfg.eval.prune_ratio,
                      static_cast<long long>(stitch_len), stitch_len > 0 ? stitch_method.c_str() : "offline",
                      r.ap.ap, r.ap.ap50, r.ap.ap75, r.ap.ar10, r.id_switches,
                      static_cast<long long>(mem.decoder_keys));
        csv << line;
    }
    return 0;
}

int cmd_infer(const std::string& config_path, const Overrides& ov, const std::string& checkpoint,
              const std::string& data_path, const std::string& out_path) {
    ExperimentConfig cfg = config_for_checkpoint(config_path, checkpoint, ov);
    VitaModel<float> model(cfg, mix(cfg.train.seed, 0xA11CE));
    load_checkpoint(model.params(), checkpoint);
    DatasetReader data(data_path);
    if (fs::exists(out_path)) fs::remove(out_path);
    for (std::size_t i = 0; i < data.size(); ++i) {
        SyntheticVideo v = data.load(i);
        auto inf = model.infer_video(v.frames, cfg.eval);
        save_tracklets(out_path, static_cast<int>(i), inf.tracklets, v.gt.T, v.gt.H, v.gt.W);
    }
    std::cout << "wrote tracklets for " << data.size() << " videos to " << out_path << "\n";
    return 0;
}

// ---- analyze-memory ----

int cmd_analyze_memory(const std::string& config_path, const Overrides& ov, std::vector<i64> t_list,
                       std::vector<i64> res_list, i64 budget, const std::string& csv_path) {
    ExperimentConfig cfg = load_cfg(config_path, ov);
    if (t_list.empty()) t_list = {6, 12, 36};
    if (res_list.empty()) res_list = {64, 128, 256};

    std::ostringstream csv;
    csv << "T,resolution,backbone_per_frame,retained_tokens,retained_embeddings,decoder_keys,dense_keys\n";
    for (i64 t : t_list)
        for (i64 res : res_list) {
            const MemoryReport m = memory_report(cfg.model, t, res, res, cfg.eval.prune_ratio);
            csv << t << "," << res << "," << m.backbone_per_frame << "," << m.retained_tokens << ","
                << m.retained_embeddings << "," << m.decoder_keys << "," << m.dense_counterfactual_keys << "\n";
        }
    std::cout << csv.str();
    if (!csv_path.empty()) write_text(csv_path, csv.str());

    const i64 res0 = res_list.front();
    const i64 kept = static_cast<i64>(std::ceil(cfg.eval.prune_ratio * static_cast<double>(cfg.model.frame_queries)));
    const i64 dense_per_frame = (res0 / cfg.model.stride) * (res0 / cfg.model.stride);
    const i64 max_t = max_frames_under_budget(budget, kept, cfg.model.channels);
    const i64 max_t_dense = max_frames_under_budget(budget, dense_per_frame, cfg.model.channels);
    std::printf("budget_floats=%lld\nmax_T=%lld\nmax_T_dense=%lld\nmax_T_ratio=%.2f\n", static_cast<long long>(budget),
                static_cast<long long>(max_t), static_cast<long long>(max_t_dense),
                max_t_dense > 0 ? static_cast<double>(max_t) / static_cast<double>(max_t_dense) : 0.0);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Video instance segmentation toolkit"};
    app.require_subcommand(1);
    (void)thread_count();

    std::string config_path, data_dir, out_dir, checkpoint, resume, data_path, out_path, csv_path;
    std::string stitch_method = "greedy";
    bool force = false;
    int crossing_count = 0;
    i64 crossing_t = 24, stitch_len = 0, budget = 1000000;
    std::vector<i64> t_list, res_list;
    Overrides ov;

    auto* gen = app.add_subcommand("gen-data", "Generate train/val/crossing splits");
    gen->add_option("--config", config_path, "Config JSON file");
    gen->add_option("--out", out_dir, "Output directory")->required();
    gen->add_flag("--force", force, "Overwrite an existing dataset");
    gen->add_option("--crossing-count", crossing_count, "Crossing-pair videos to generate");
    gen->add_option("--crossing-T", crossing_t, "Crossing video length");
    add_override_flags(gen, ov);

    auto* train = app.add_subcommand("train", "Train a model");
    train->add_option("--config", config_path, "Config JSON file");
    train->add_option("--data", data_dir, "Dataset directory from gen-data")->required();
    train->add_option("--out", out_dir, "Run directory")->required();
    train->add_option("--resume", resume, "Checkpoint to resume from");
    add_override_flags(train, ov);

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    ev->add_option("--config", config_path, "Config JSON (default: next to checkpoint)");
    ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    ev->add_option("--data", data_path, "A .vids file")->required();
    ev->add_option("--stitch-len", stitch_len, "Clip length for stitching (0 = complete offline)");
    ev->add_option("--stitch", stitch_method, "greedy|hungarian")
        ->check(CLI::IsMember({"greedy", "hungarian"}));
    ev->add_option("--csv", csv_path, "Append one metrics row to this CSV");
    add_override_flags(ev, ov);

    auto* inf = app.add_subcommand("infer", "Run inference, write tracklet records");
    inf->add_option("--config", config_path, "Config JSON (default: next to checkpoint)");
    inf->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    inf->add_option("--data", data_path, "A .vids file")->required();
    inf->add_option("--out", out_path, "Tracklet output file")->required();
    add_override_flags(inf, ov);

    auto* mem = app.add_subcommand("analyze-memory", "Retained-state scaling report");
    mem->add_option("--config", config_path, "Config JSON file");
    mem->add_option("--T-list", t_list, "Video lengths to tabulate");
    mem->add_option("--res-list", res_list, "Square resolutions to tabulate");
    mem->add_option("--budget", budget, "Float budget for the max-T summary");
    mem->add_option("--csv", csv_path, "Write the table to this CSV");
    add_override_flags(mem, ov);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, ov, out_dir, force, crossing_count, crossing_t);
        if (train->parsed()) return cmd_train(config_path, ov, data_dir, out_dir, resume);
        if (ev->parsed()) return cmd_eval(config_path, ov, checkpoint, data_path, stitch_len, stitch_method, csv_path);
        if (inf->parsed()) return cmd_infer(config_path, ov, checkpoint, data_path, out_path);
        if (mem->parsed()) return cmd_analyze_memory(config_path, ov, t_list, res_list, budget, csv_path);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
