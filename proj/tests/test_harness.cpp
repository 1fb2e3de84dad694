#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "testcfg.hpp"
#include "vitkit/config.hpp"

namespace fs = std::filesystem;
using namespace vita;

namespace {

struct CmdResult {
    int code = -1;
    std::string output;
};

CmdResult run_vita(const std::string& args) {
    const std::string cmd = std::string(VITA_BIN) + " " + args + " 2>&1";
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    CmdResult r;
    char buf[512];
    while (std::fgets(buf, sizeof(buf), p)) r.output += buf;
    const int st = pclose(p);
    r.code = WEXITSTATUS(st);
    return r;
}

std::string file_bytes(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("/tmp") / ("vitkit_harness_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

// small config so CLI runs stay fast
std::string write_tiny_config(const TempDir& dir) {
    ExperimentConfig cfg = vita::testing::tiny_experiment();
    cfg.data.train_videos = 3;
    cfg.data.val_videos = 2;
    cfg.train.steps = 2;
    cfg.train.batch = 1;
    cfg.train.log_every = 1;
    cfg.train.checkpoint_every = 2;
    const std::string path = dir / "config.json";
    std::ofstream(path) << config_to_json(cfg);
    return path;
}

}  // namespace

TEST_CASE("config serialization") {
    ExperimentConfig cfg = vita::testing::tiny_experiment();
    cfg.train.lr = 3e-4;
    cfg.loss.lambda_sim = 0.25;
    SUBCASE("round trip preserves every field") {
        ExperimentConfig back = parse_config(config_to_json(cfg));
        CHECK(config_to_json(back) == config_to_json(cfg));
        CHECK(config_hash(back) == config_hash(cfg));
    }
    SUBCASE("hash tracks content") {
        ExperimentConfig other = cfg;
        other.model.window = 7;
        CHECK(config_hash(other) != config_hash(cfg));
    }
    SUBCASE("unknown keys are rejected with a path") {
        CHECK_THROWS_WITH_AS(parse_config(R"({"model": {"bogus": 1}})"), doctest::Contains("bogus"),
                             std::invalid_argument);
    }
    SUBCASE("invalid values are rejected") {
        CHECK_THROWS_AS(parse_config(R"({"data": {"clip_len": 0}})"), std::invalid_argument);
    }
}

TEST_CASE("exit codes") {
    CHECK(run_vita("").code == 1);            // missing subcommand
    CHECK(run_vita("--help").code == 0);      // help is a success
    CHECK(run_vita("bogus-subcommand").code == 1);

    TempDir dir("exit");
    const std::string cfg = write_tiny_config(dir);
    SUBCASE("bad option value is a usage error") {
        auto r = run_vita("eval --config " + cfg + " --checkpoint /nonexistent.vitk --data /nonexistent.vids --prune-r 1.5");
        CHECK(r.code == 1);
        CHECK(r.output.find("prune ratio must be in (0, 1]") != std::string::npos);
    }
    SUBCASE("missing input file is a runtime failure") {
        auto r = run_vita("eval --config " + cfg + " --checkpoint /nonexistent.vitk --data /nonexistent.vids");
        CHECK(r.code == 2);
        CHECK(r.output.find("error:") != std::string::npos);
    }
    SUBCASE("unknown config key is a usage error") {
        std::ofstream(dir / "bad.json") << R"({"train": {"nope": 1}})";
        auto r = run_vita("gen-data --config " + (dir / "bad.json") + " --out " + (dir / "d"));
        CHECK(r.code == 1);
        CHECK(r.output.find("nope") != std::string::npos);
    }
}

TEST_CASE("gen-data is deterministic in the seed and refuses accidental overwrite") {
    TempDir dir("gendata");
    const std::string cfg = write_tiny_config(dir);
    const std::string common = "gen-data --config " + cfg + " --seed 5 --crossing-count 1 --crossing-T 4 --out ";
    REQUIRE(run_vita(common + (dir / "a")).code == 0);
    REQUIRE(run_vita(common + (dir / "b")).code == 0);
    for (const char* f : {"train.vids", "val.vids", "crossing.vids", "config.json"})
        CHECK(file_bytes(dir.path / "a" / f) == file_bytes(dir.path / "b" / f));

    SUBCASE("different seeds give different data") {
        REQUIRE(run_vita("gen-data --config " + cfg + " --seed 6 --out " + (dir / "c")).code == 0);
        CHECK(file_bytes(dir.path / "a" / "train.vids") != file_bytes(dir.path / "c" / "train.vids"));
    }
    SUBCASE("an existing dataset needs --force") {
        auto r = run_vita(common + (dir / "a"));
        CHECK(r.code == 2);
        CHECK(r.output.find("--force") != std::string::npos);
        CHECK(run_vita(common + (dir / "a") + " --force").code == 0);
    }
}

TEST_CASE("training runs, logs and checkpoints deterministically") {
    TempDir dir("train");
    const std::string cfg = write_tiny_config(dir);
    REQUIRE(run_vita("gen-data --config " + cfg + " --seed 9 --out " + (dir / "data")).code == 0);

    const std::string common = "train --config " + cfg + " --seed 9 --data " + (dir / "data") + " --out ";
    REQUIRE(run_vita(common + (dir / "run1")).code == 0);
    REQUIRE(run_vita(common + (dir / "run2")).code == 0);
    CHECK(file_bytes(dir.path / "run1" / "train_log.csv") == file_bytes(dir.path / "run2" / "train_log.csv"));
    CHECK(file_bytes(dir.path / "run1" / "ckpt_2.vitk") == file_bytes(dir.path / "run2" / "ckpt_2.vitk"));

    SUBCASE("the manifest records the run") {
        const std::string m = file_bytes(dir.path / "run1" / "manifest.json");
        CHECK(m.find("config_hash") != std::string::npos);
        CHECK(m.find("ckpt_2.vitk") != std::string::npos);
        CHECK(m.find("train_log.csv") != std::string::npos);
    }
    SUBCASE("an interrupted run resumes to the identical checkpoint") {
        REQUIRE(run_vita(common + (dir / "run3") + " --steps 1 --checkpoint-every 1").code == 0);
        REQUIRE(run_vita(common + (dir / "run3") + " --steps 2 --checkpoint-every 1 --resume " +
                         (dir / "run3") + "/ckpt_latest.vitk")
                    .code == 0);
        CHECK(file_bytes(dir.path / "run3" / "ckpt_2.vitk") == file_bytes(dir.path / "run1" / "ckpt_2.vitk"));
    }
    SUBCASE("resuming with a different config is refused") {
        auto r = run_vita(common + (dir / "run1") + " --lr 0.01 --resume " + (dir / "run1") + "/ckpt_latest.vitk");
        CHECK(r.code == 2);
        CHECK(r.output.find("differs at train.lr") != std::string::npos);
    }

    SUBCASE("eval and infer consume the checkpoint") {
        auto r = run_vita("eval --checkpoint " + (dir / "run1") + "/ckpt_2.vitk --data " + (dir / "data") +
                          "/val.vids");
        CHECK(r.code == 0);
        CHECK(r.output.find("AP=") != std::string::npos);
        CHECK(r.output.find("decoder_keys=") != std::string::npos);
        auto i = run_vita("infer --checkpoint " + (dir / "run1") + "/ckpt_2.vitk --data " + (dir / "data") +
                          "/val.vids --out " + (dir / "tracklets.jsonl"));
        CHECK(i.code == 0);
        CHECK(fs::exists(dir.path / "tracklets.jsonl"));
    }
}

TEST_CASE("analyze-memory reports resolution-independent key counts") {
    TempDir dir("mem");
    auto r = run_vita("analyze-memory --csv " + (dir / "mem.csv"));
    REQUIRE(r.code == 0);
    // decoder keys at T=36 are 720 for every resolution; dense keys grow
    CHECK(r.output.find("36,64,") != std::string::npos);
    CHECK(r.output.find("max_T=781") != std::string::npos);
    CHECK(r.output.find("max_T_dense=61") != std::string::npos);
    const std::string csv = file_bytes(dir.path / "mem.csv");
    int count720 = 0;
    for (std::size_t pos = 0; (pos = csv.find(",720,", pos)) != std::string::npos; ++pos) ++count720;
    CHECK(count720 == 3);
}
